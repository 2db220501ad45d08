"""Seeded generators of certified test maps used by the test-suite and the demos."""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import matgeom
from .meshes import lattice_mesh
from .pamap import Mesh2, PAMap, bilip_constant, certify_injective
from .tiling import GridComplex


def grid_mesh_for(grid: GridComplex, sub: int = 1) -> Mesh2:
    """Lattice-compatible mesh of the whole domain at the tiling's spacing."""
    return lattice_mesh(grid.layers >= 0, grid.origin, grid.r, sub)


def random_matrix(rng: np.random.Generator, L: float) -> np.ndarray:
    """Random A with det A > 0 and max(|A|, |A^-1|) <= L."""
    if L <= 1:
        th = rng.uniform(0, 2 * np.pi)
        return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    th1, th2 = rng.uniform(0, 2 * np.pi, 2)
    s1, s2 = np.exp(rng.uniform(-np.log(L), np.log(L), 2))
    R = lambda t: np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return R(th1) @ np.diag([s1, s2]) @ R(th2)


def _wave(rng, amp, kmax):
    k = rng.uniform(-kmax, kmax, (2, 2))
    ph = rng.uniform(0, 2 * np.pi, 2)
    a = amp * rng.uniform(-1, 1, 2)

    def g(X):
        return np.column_stack([a[0] * np.sin(X @ k[0] + ph[0]), a[1] * np.sin(X @ k[1] + ph[1])])
    return g


def random_bilip_map(rng: np.random.Generator, mesh: Mesh2, L: float, tries: int = 50) -> PAMap:
    """Affine map plus a smooth perturbation; certified with cell constant <= L."""
    for _ in range(tries):
        A = random_matrix(rng, L ** 0.5 if L > 1 else 1.0)
        b = rng.uniform(-1, 1, 2)
        if L > 1:
            g = _wave(rng, 0.05, 4.0)
            f = lambda X: X @ A.T + b + g(X)
        else:
            f = lambda X: X @ A.T + b
        m = PAMap(mesh, f(mesh.vertices))
        if certify_injective(m) and _cell_L(m) <= L * (1 + 1e-12):
            return m
    raise RuntimeError("could not draw a certified map; lower the perturbation")


def _cell_L(m: PAMap) -> float:
    return float(matgeom.distortion(m.gradients).max())


def random_close_pair(rng: np.random.Generator, mesh: Mesh2, r: float, L: float,
                      frac: float = 0.9, tries: int = 50) -> Tuple[PAMap, PAMap]:
    """(ytilde, y), both certified with cell constant <= L, with
    sup |ytilde - y| <= frac * r / (12 L^3)."""
    level = frac * r / (12.0 * L ** 3)
    y = random_bilip_map(rng, mesh, L)
    V = mesh.vertices
    c = V.mean(axis=0)
    diam = float(np.linalg.norm(V - c, axis=1).max())
    for _ in range(tries):
        if L > 1:
            g = _wave(rng, level / np.sqrt(2), 1.0 / r)
            t = rng.uniform(-1, 1, 2) * 0.3 * level
            d = g(V) + t
        else:
            # rigid motion close to y: small rotation about the centre plus a shift
            th = rng.uniform(-1, 1) * 0.5 * level / diam
            R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            Y0 = y.images
            yc = Y0.mean(axis=0)
            moved = (Y0 - yc) @ R.T + yc
            d = moved - Y0 + rng.uniform(-1, 1, 2) * 0.3 * level
        if np.linalg.norm(d, axis=1).max() > level:
            continue
        yt = PAMap(mesh, y.images + d)
        if certify_injective(yt) and _cell_L(yt) <= L * (1 + 1e-12):
            return yt, y
    raise RuntimeError("could not draw a close certified pair")


BOUNDARY_KINDS = ("affine", "smooth", "star", "bent", "hook")


def _sampled_distortion(X: np.ndarray, Y: np.ndarray) -> float:
    dx = np.linalg.norm(X[:, None] - X[None], axis=2)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=2)
    iu = np.triu_indices(len(X), 1)
    return float(np.max(np.maximum(dy[iu] / dx[iu], dx[iu] / dy[iu])))


def random_boundary_map(rng: np.random.Generator, kind: str, L: float = 4.0):
    """A vectorised bi-Lipschitz map of the plane near [-1, 1]^2.

    affine: A x; smooth: A x plus a small wave; star: radial modulation
    r -> r (1 + a sin(k theta)); bent: the square rolled onto an annulus
    sector (non-convex image); hook: a thin band bent through up to 1.6 pi.
    """
    A = random_matrix(rng, min(L, 2.0))
    if kind == "affine":
        return lambda X: X @ A.T
    if kind == "smooth":
        g = _wave(rng, 0.08, 3.0)
        return lambda X: X @ A.T + g(X)
    if kind == "star":
        k = int(rng.integers(2, 6))
        a = rng.uniform(0.05, 0.9 / k)
        ph = rng.uniform(0, 2 * np.pi)

        def f(X):
            th = np.arctan2(X[:, 1], X[:, 0])
            return X * (1 + a * np.sin(k * th + ph))[:, None]
        return f
    if kind == "bent":
        R = rng.uniform(1.15, 3.0)
        rot = rng.uniform(0, 2 * np.pi)

        def f(X):
            th = X[:, 0] / R + rot
            rad = R - X[:, 1]
            return np.column_stack([rad * np.cos(th), rad * np.sin(th)])
        return f
    if kind == "hook":
        alpha = rng.uniform(0.9, 1.6) * np.pi
        width = rng.uniform(0.3, 0.4)
        rot = rng.uniform(0, 2 * np.pi)

        def f(X):
            th = X[:, 0] * alpha / 2 + rot
            rad = 1.0 - width * X[:, 1]
            return np.column_stack([rad * np.cos(th), rad * np.sin(th)])
        return f
    raise ValueError(f"unknown boundary kind {kind!r}")


def boundary_corpus(seed: int, count: int, per_side: int = 16, L: float = 4.0):
    """Seeded list of certified boundary data on the unit square [-1, 1]^2
    (centre 0, half-size 1), cycling through BOUNDARY_KINDS."""
    from .extension import BoundaryData
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(50 * count):
        if len(out) == count:
            break
        kind = BOUNDARY_KINDS[len(out) % len(BOUNDARY_KINDS)]
        f = random_boundary_map(rng, kind, L)
        bd = BoundaryData.from_map(f, (0.0, 0.0), 1.0, per_side)
        Lb = _sampled_distortion(bd.positions(), bd.images)
        if Lb > L:
            continue
        bd = BoundaryData(bd.center, bd.half, bd.params, bd.images, Lb)
        try:
            bd.validate()
        except Exception:
            continue
        out.append((kind, bd))
    if len(out) < count:
        raise RuntimeError("could not draw enough certified boundary data")
    return out
