"""2x2 matrix kernel and the two planar inequalities used by the cut-off.

Matrices are plain ``numpy`` arrays of shape (2, 2); the batched helpers take
arrays of shape (..., 2, 2). The matrix norm is always the spectral norm.
"""
from __future__ import annotations

from typing import Optional, Tuple

import numpy as np

from .errors import InputError

GEOM_TOL = 1e-9

Mat2 = np.ndarray


def as_mat2(A) -> np.ndarray:
    """Coerce a nested list, a flat 4-sequence or an array to a (2, 2) float array."""
    M = np.asarray(A, dtype=float)
    if M.shape == (4,):
        M = M.reshape(2, 2)
    if M.shape != (2, 2):
        raise InputError(f"expected a 2x2 matrix, got shape {M.shape}")
    return M


def det2(G: np.ndarray) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    return G[..., 0, 0] * G[..., 1, 1] - G[..., 0, 1] * G[..., 1, 0]


def singular_values(G: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batched closed-form singular values (sigma_max, sigma_min).

    For G = [[a, b], [c, d]] put q = |(a + d, c - b)| and p = |(a - d, c + b)|;
    then sigma_max = (q + p) / 2. sigma_min is recovered as |det G| / sigma_max,
    which keeps sigma_max * sigma_min = |det G| to rounding. Neither step
    cancels, so near-conformal matrices keep full precision.
    """
    G = np.asarray(G, dtype=float)
    a, b, c, d = G[..., 0, 0], G[..., 0, 1], G[..., 1, 0], G[..., 1, 1]
    q = np.hypot(a + d, c - b)
    p = np.hypot(a - d, c + b)
    smax = 0.5 * (q + p)
    det = np.abs(a * d - b * c)
    with np.errstate(divide="ignore", invalid="ignore"):
        smin = np.where(smax > 0, det / np.where(smax > 0, smax, 1.0), 0.0)
    return smax, smin


def svd2(A) -> Tuple[float, float, bool]:
    """Singular values of a 2x2 matrix and whether det A > 0."""
    M = as_mat2(A)
    smax, smin = singular_values(M)
    return float(smax), float(smin), bool(det2(M) > 0)


def norm(A) -> float:
    return svd2(A)[0]


def inv_norm(A) -> float:
    """|A^-1| = 1 / sigma_min(A); +inf for singular A."""
    smin = svd2(A)[1]
    return float("inf") if smin == 0 else 1.0 / smin


def distortion(G: np.ndarray) -> np.ndarray:
    """Batched max(|G|, |G^-1|), +inf where G is singular."""
    smax, smin = singular_values(G)
    with np.errstate(divide="ignore"):
        inv = np.where(smin > 0, 1.0 / np.where(smin > 0, smin, 1.0), np.inf)
    return np.maximum(smax, inv)


def check_rho(rho: float) -> None:
    if not (rho >= 1):
        raise InputError(f"class parameter rho must be >= 1, got {rho}")


def class_membership(A, rho: float, positive: bool) -> bool:
    """Membership in R_rho (or R_rho+ when ``positive``)."""
    check_rho(rho)
    M = as_mat2(A)
    smax, smin, signed = svd2(M)
    if smin == 0:
        return False
    if positive and not signed:
        return False
    return smax <= rho and 1.0 / smin <= rho


def class_membership_batch(G: np.ndarray, rho: float, positive: bool) -> np.ndarray:
    check_rho(rho)
    smax, smin = singular_values(G)
    ok = (smin > 0) & (smax <= rho)
    with np.errstate(divide="ignore"):
        ok &= np.where(smin > 0, 1.0 / np.where(smin > 0, smin, 1.0), np.inf) <= rho
    if positive:
        ok &= det2(G) > 0
    return ok


def obtuse_triangle_lower_bound(z, p, zp) -> Tuple[Optional[bool], float, float]:
    """Check |z - zp| >= (sqrt2/2)(|z - p| + |zp - p|) for an angle >= pi/2 at p.

    Returns (holds, lhs, rhs). When the angle at p is acute the
    precondition fails and ``holds`` is None: the inequality is not asserted.
    """
    holds, lhs, rhs = obtuse_triangle_batch(np.asarray([z], float), np.asarray([p], float),
                                            np.asarray([zp], float))
    h = None if holds[0] < 0 else bool(holds[0])
    return h, float(lhs[0]), float(rhs[0])


def obtuse_triangle_batch(z, p, zp):
    """Vectorised form; ``holds`` is an int array with -1 for inadmissible rows."""
    z, p, zp = (np.asarray(a, float).reshape(-1, 2) for a in (z, p, zp))
    u, w = z - p, zp - p
    admissible = np.einsum("ij,ij->i", u, w) <= GEOM_TOL
    lhs = np.linalg.norm(z - zp, axis=1)
    rhs = (np.sqrt(2.0) / 2.0) * (np.linalg.norm(u, axis=1) + np.linalg.norm(w, axis=1))
    holds = (lhs >= rhs - GEOM_TOL).astype(int)
    holds[~admissible] = -1
    return holds, lhs, rhs


def ball_separation_lower_bound(w, xi: float, a, b, c) -> Optional[bool]:
    """Check |a - c| >= (|a - b| + |b - c|) / 3.

    Preconditions: a on the segment w b, |b - w| = xi and |c - w| > xi.
    Returns None when they are violated.
    """
    res = ball_separation_batch(np.asarray([w], float), np.asarray([xi], float),
                                np.asarray([a], float), np.asarray([b], float),
                                np.asarray([c], float))
    return None if res[0] < 0 else bool(res[0])


def ball_separation_batch(w, xi, a, b, c) -> np.ndarray:
    w, a, b, c = (np.asarray(v, float).reshape(-1, 2) for v in (w, a, b, c))
    xi = np.broadcast_to(np.asarray(xi, float), (len(w),))
    wb = b - w
    wa = a - w
    cross = wb[:, 0] * wa[:, 1] - wb[:, 1] * wa[:, 0]
    L2 = np.einsum("ij,ij->i", wb, wb)
    t = np.einsum("ij,ij->i", wa, wb) / np.where(L2 > 0, L2, 1.0)
    on_seg = (np.abs(cross) <= GEOM_TOL * np.maximum(1.0, L2)) & (t >= -GEOM_TOL) & (t <= 1 + GEOM_TOL)
    admissible = on_seg & (np.abs(np.sqrt(L2) - xi) <= GEOM_TOL * np.maximum(1.0, xi))
    admissible &= np.linalg.norm(c - w, axis=1) > xi
    lhs = np.linalg.norm(a - c, axis=1)
    rhs = (np.linalg.norm(a - b, axis=1) + np.linalg.norm(b - c, axis=1)) / 3.0
    out = (lhs >= rhs - GEOM_TOL).astype(int)
    out[~admissible] = -1
    return out
