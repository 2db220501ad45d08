"""Certified piecewise-affine bi-Lipschitz maps: cut-off near the boundary,
square extension, empirical gradient Young measures and relaxation estimates."""

__version__ = "0.1.0"

from .errors import (BilipError, InputError, NumericalError, OutOfDomainError,  # noqa: E402
                     PreconditionError, SupportViolation)
from .pamap import Mesh2, PAMap, certify_injective  # noqa: E402

__all__ = [
    "__version__", "BilipError", "InputError", "NumericalError", "OutOfDomainError",
    "PreconditionError", "SupportViolation", "Mesh2", "PAMap", "certify_injective",
]
