"""Exact piecewise-affine laminates with affine boundary trace.

For wells A1 = A + (1 - lam) b (x) n and A2 = A - lam b (x) n the laminate is
u(x) = A x + b psi(x) with psi = min(phi(x . n), c dist_t(x)), where phi is the
p-periodic sawtooth with slope 1 - lam on a fraction lam of each period and
slope -lam elsewhere, and dist_t is the distance to the two sides parallel to
n's normal. For axis-aligned n the mesh resolves every kink of psi, so the
map, its gradients and its energy are exact.
"""
from __future__ import annotations

from typing import Callable, Optional, Tuple

import numpy as np

from . import matgeom
from .errors import InputError
from .meshes import grid_mesh, tensor_mesh
from .pamap import Mesh2, PAMap, certify_injective


def rank_one_split(A1, A2, tol: float = 1e-9) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(b, n) with A1 - A2 = b (x) n and |n| = 1, or None if not rank one."""
    D = matgeom.as_mat2(A1) - matgeom.as_mat2(A2)
    U, s, Vt = np.linalg.svd(D)
    if s[0] == 0 or s[1] > tol * s[0]:
        return None
    return s[0] * U[:, 0], Vt[0]


def _axis_of(n: np.ndarray) -> Optional[int]:
    for k in range(2):
        if abs(abs(n[k]) - 1.0) <= 1e-12:
            return k
    return None


def _sawtooth(t: np.ndarray, p: float, lam: float) -> np.ndarray:
    s = np.mod(t, p)
    return np.where(s <= lam * p, (1 - lam) * s, lam * (p - s))


def _aligned_mesh(k: int, lam: float, c: float, rows: Optional[int] = None):
    """Mesh of the unit square for layers normal to e1, with psi values."""
    p = 1.0 / k
    hb = lam * (1 - lam) * p / c
    if hb >= 0.5:
        raise InputError("boundary layer too thick: increase the period count or c")
    xs = np.unique(np.concatenate([np.arange(k + 1) * p, np.arange(k) * p + lam * p]))
    xs[-1] = 1.0
    ni = rows if rows is not None else max(1, int(round((1 - 2 * hb) / p)))
    ys = np.concatenate([[0.0], hb + (1 - 2 * hb) * np.arange(ni + 1) / ni, [1.0]])
    nx, ny = len(xs) - 1, len(ys) - 1
    # kink diagonals in the boundary rows: rising columns LL-UR at the bottom
    rising = np.isclose(np.mod(xs[:-1], p), 0.0) | np.isclose(np.mod(xs[:-1], p), p)
    flip = np.zeros((ny, nx), bool)
    flip[0] = ~rising
    flip[-1] = rising
    mesh = tensor_mesh(xs, ys, flip)
    V = mesh.vertices
    dist = np.minimum(V[:, 1], 1.0 - V[:, 1])
    psi = np.minimum(_sawtooth(V[:, 0], p, lam), c * dist)
    return mesh, psi


def laminate_map(A, b, n, lam: float, k: int, c: float = 0.5, resolution: int = 64,
                 check: bool = True) -> PAMap:
    """Laminate on the unit square with k periods and trace A x.

    For n = +-e1 or +-e2 the construction is exact; for other normals psi is
    interpolated on a uniform grid of the given resolution (a seed, not an
    exact laminate).
    """
    A = matgeom.as_mat2(A)
    b = np.asarray(b, float)
    n = np.asarray(n, float)
    n = n / np.linalg.norm(n)
    if not 0 < lam < 1:
        raise InputError(f"volume fraction must lie in (0, 1), got {lam}")
    if k < 1:
        raise InputError("period count must be >= 1")
    axis = _axis_of(n)
    if axis is not None:
        if n[axis] < 0:
            # b (x) n = (-b) (x) (-n): same wells, positive normal
            b, n = -b, -n
        mesh, psi = _aligned_mesh(k, lam, c)
        if axis == 1:
            mesh = Mesh2(mesh.vertices[:, ::-1].copy(), mesh.cells)
        V = mesh.vertices
        m = PAMap(mesh, V @ A.T + psi[:, None] * b[None])
    else:
        mesh = grid_mesh(0, 0, 1, 1, resolution)
        V = mesh.vertices
        d = np.minimum.reduce([V[:, 0], V[:, 1], 1 - V[:, 0], 1 - V[:, 1]])
        t = V @ n
        psi = np.minimum(_sawtooth(t - t.min(), 1.0 / k, lam), c * d)
        m = PAMap(mesh, V @ A.T + psi[:, None] * b[None])
    if check and not certify_injective(m):
        raise InputError("laminate is not orientation preserving for these wells; "
                         "decrease c or choose wells with positive determinant")
    return m


def laminate_from_wells(A1, A2, lam: float, k: int, c: float = 0.5, **kw) -> PAMap:
    """Laminate between rank-one connected wells with mean lam A1 + (1 - lam) A2."""
    split = rank_one_split(A1, A2)
    if split is None:
        raise InputError("wells are not rank-one connected")
    b, n = split
    A = lam * matgeom.as_mat2(A1) + (1 - lam) * matgeom.as_mat2(A2)
    return laminate_map(A, b, n, lam, k, c, **kw)


def laminate_energy_oracle(v: Callable, A, b, n, lam: float, k: int, c: float = 0.5) -> float:
    """Closed-form energy of the aligned laminate on the unit square.

    The layers carry A1 on area lam (1 - hb), A2 on (1 - lam)(1 - hb), and
    the two boundary layers (area hb / 2 each) carry A +- c b (x) t with t the
    inward unit normal of the sides cut by the layers, hb = lam (1 - lam) / (k c).
    """
    A = matgeom.as_mat2(A)
    b = np.asarray(b, float)
    n = np.asarray(n, float) / np.linalg.norm(n)
    axis = _axis_of(n)
    if axis is None:
        raise InputError("the closed form needs an axis-aligned normal")
    if n[axis] < 0:
        b, n = -b, -n
    t = np.zeros(2)
    t[1 - axis] = 1.0
    hb = lam * (1 - lam) / (k * c)
    A1 = A + (1 - lam) * np.outer(b, n)
    A2 = A - lam * np.outer(b, n)
    vals = np.asarray(v(np.stack([A1, A2, A + c * np.outer(b, t), A - c * np.outer(b, t)])), float)
    return float(lam * (1 - hb) * vals[0] + (1 - lam) * (1 - hb) * vals[1] + 0.5 * hb * (vals[2] + vals[3]))


def laminate_fractions(k: int, lam: float, c: float = 0.5) -> dict:
    """Exact area bookkeeping of the aligned laminate (unit square)."""
    hb = lam * (1 - lam) / (k * c)
    return {"A1": lam * (1 - hb), "A2": (1 - lam) * (1 - hb), "bottom": hb / 2, "top": hb / 2}
