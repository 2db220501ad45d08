"""Energy densities on 2x2 matrices, declared in a small TOML file.

Example::

    [energy]
    kind = "multiwell"          # or "quadratic"
    wells = [[1.1, 0, 0, 1], [0.9, 0, 0, 1]]
    rho = 10                    # optional: +inf outside R_rho+
    blowup = 0.0                # optional: adds blowup * det^(-blowup_power)
    blowup_power = 1.0

Every density is +inf where det <= 0. With ``rho`` it is +inf outside R_rho+.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from . import matgeom
from .errors import InputError

KINDS = ("quadratic", "multiwell")


@dataclass(frozen=True, eq=False)
class EnergyDensity:
    kind: str
    wells: np.ndarray                  # (m, 2, 2)
    rho: Optional[float] = None
    blowup: float = 0.0
    blowup_power: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown energy kind {self.kind!r}; expected one of {KINDS}")
        W = np.asarray(self.wells, float)
        if W.ndim == 2 and W.shape[1] == 4:
            W = W.reshape(-1, 2, 2)
        if W.ndim != 3 or W.shape[1:] != (2, 2) or len(W) == 0:
            raise InputError("wells must be a non-empty list of 2x2 matrices (4 entries each)")
        if self.kind == "quadratic" and len(W) != 1:
            raise InputError("a quadratic density takes exactly one well")
        if self.rho is not None:
            matgeom.check_rho(self.rho)
        if self.blowup < 0 or self.blowup_power <= 0:
            raise InputError("blowup must be >= 0 and blowup_power > 0")
        object.__setattr__(self, "wells", W)

    @property
    def convex(self) -> bool:
        """Convex on the positive-determinant matrices."""
        return self.kind == "quadratic" and self.blowup == 0 and self.rho is None

    def admissible(self, G: np.ndarray) -> np.ndarray:
        G = np.asarray(G, float)
        ok = matgeom.det2(G) > 0
        if self.rho is not None:
            ok &= matgeom.class_membership_batch(G, self.rho, True)
        return ok

    def _wells_sq(self, G):
        d = G[..., None, :, :] - self.wells
        return np.sum(d * d, axis=(-2, -1))

    def __call__(self, G) -> np.ndarray:
        G = np.asarray(G, float)
        ok = self.admissible(G)
        val = self._wells_sq(G).min(axis=-1)
        if self.blowup > 0:
            D = matgeom.det2(G)
            with np.errstate(divide="ignore", invalid="ignore"):
                val = val + self.blowup * np.where(ok, D, 1.0) ** (-self.blowup_power)
        return np.where(ok, val, np.inf)

    def grad(self, G) -> np.ndarray:
        """Derivative in G (the nearest well wins; finite where admissible)."""
        G = np.asarray(G, float)
        k = np.argmin(self._wells_sq(G), axis=-1)
        out = 2.0 * (G - self.wells[k])
        if self.blowup > 0:
            D = matgeom.det2(G)
            cof = np.stack([np.stack([G[..., 1, 1], -G[..., 1, 0]], -1),
                            np.stack([-G[..., 0, 1], G[..., 0, 0]], -1)], -2)
            with np.errstate(divide="ignore", invalid="ignore"):
                fac = -self.blowup * self.blowup_power * np.where(D > 0, D, 1.0) ** (-self.blowup_power - 1)
            out = out + fac[..., None, None] * cof
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "wells": self.wells.reshape(-1, 4).tolist(),
             "blowup": self.blowup, "blowup_power": self.blowup_power}
        if self.rho is not None:
            d["rho"] = self.rho
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def from_dict(d: dict) -> EnergyDensity:
    e = d.get("energy", d)
    if not isinstance(e, dict):
        raise InputError("energy table missing")
    unknown = set(e) - {"kind", "wells", "rho", "blowup", "blowup_power"}
    if unknown:
        raise InputError(f"unknown energy keys: {sorted(unknown)}")
    try:
        return EnergyDensity(str(e.get("kind", "multiwell")), np.asarray(e["wells"], float),
                             None if e.get("rho") is None else float(e["rho"]),
                             float(e.get("blowup", 0.0)), float(e.get("blowup_power", 1.0)))
    except KeyError as exc:
        raise InputError(f"energy: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise InputError(f"energy: {exc}") from exc


def loads(text: str) -> EnergyDensity:
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"invalid TOML: {exc}") from exc


def load(path) -> EnergyDensity:
    try:
        with open(path, "rb") as fh:
            return from_dict(tomllib.load(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: invalid TOML: {exc}") from exc


def single_well(A, **kw) -> EnergyDensity:
    return EnergyDensity("quadratic", np.asarray(matgeom.as_mat2(A))[None], **kw)


def double_well(A1, A2, **kw) -> EnergyDensity:
    return EnergyDensity("multiwell", np.stack([matgeom.as_mat2(A1), matgeom.as_mat2(A2)]), **kw)


def rank_one_pairs(v: EnergyDensity, tol: float = 1e-9):
    """Index pairs (i, j) of rank-one connected wells, both with det > 0."""
    W = v.wells
    out = []
    for i in range(len(W)):
        for j in range(i + 1, len(W)):
            D = W[i] - W[j]
            if matgeom.det2(W[i]) > 0 and matgeom.det2(W[j]) > 0 and \
                    abs(matgeom.det2(D)) <= tol * max(np.sum(D * D), 1e-300):
                out.append((i, j))
    return out
