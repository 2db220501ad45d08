"""Exception hierarchy. The CLI maps InputError to exit code 2 and
NumericalError to exit code 3."""


class BilipError(Exception):
    """Base class for all package errors."""


class InputError(BilipError, ValueError):
    """Invalid parameter, schema violation or malformed input."""


class NumericalError(BilipError):
    """A construction or certification failed numerically."""


class OutOfDomainError(InputError):
    """A query point lies outside the mesh domain (or image)."""


class SupportViolation(NumericalError):
    """An atom with non-positive determinant appeared in a measure that is
    supposed to be supported in the positive-determinant classes."""


class PreconditionError(NumericalError):
    """A numerical precondition (closeness, admissibility) is broken."""
