"""Piecewise-affine maps on conforming triangle meshes.

A :class:`PAMap` is a :class:`Mesh2` plus one image point per vertex; the map
is the affine interpolant of those images on every triangle. Certification
follows the discrete invertibility criterion: positive determinant on every
cell plus a simple boundary image.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import shapely
from shapely.geometry import LinearRing, LineString, Polygon
from shapely.validation import explain_validity

from . import matgeom
from .errors import InputError, NumericalError, OutOfDomainError

LOCATE_TOL = 1e-12


def boundary_loops(cells: np.ndarray) -> List[np.ndarray]:
    """Ordered boundary loops of a CCW-oriented triangle mesh.

    Edges used by exactly one cell, chained head to tail. The outer loop comes
    out counter-clockwise and hole loops clockwise.
    """
    cells = np.asarray(cells, dtype=np.int64)
    e = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [2, 0]]])
    key = np.sort(e, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    bd = e[counts[inv.ravel()] == 1]
    nxt = {}
    for a, b in bd:
        if int(a) in nxt:
            raise InputError(f"boundary vertex {int(a)} is pinched (non-manifold boundary)")
        nxt[int(a)] = int(b)
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        v = nxt[start]
        while v != start:
            if v in seen or v not in nxt:
                raise InputError("boundary edges do not form closed loops")
            loop.append(v)
            seen.add(v)
            v = nxt[v]
        loops.append(np.asarray(loop, dtype=np.int64))
    loops.sort(key=lambda l: -len(l))
    return loops


def _signed_area(P: np.ndarray) -> float:
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True, eq=False)
class Mesh2:
    vertices: np.ndarray
    cells: np.ndarray
    boundary: Tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        V = np.ascontiguousarray(np.asarray(self.vertices, dtype=float))
        C = np.ascontiguousarray(np.asarray(self.cells, dtype=np.int64))
        if V.ndim != 2 or V.shape[1] != 2:
            raise InputError("vertices must be an (N, 2) array")
        if C.ndim != 2 or C.shape[1] != 3 or len(C) == 0:
            raise InputError("cells must be a non-empty (M, 3) array")
        if C.min() < 0 or C.max() >= len(V):
            raise InputError("cell index out of range")
        if not np.all(np.isfinite(V)):
            raise InputError("non-finite vertex coordinates")
        a = _cell_dets(V, C)
        scale = max(1.0, float(np.ptp(V, axis=0).max())) ** 2
        if np.any(np.abs(a) <= 1e-14 * scale):
            bad = int(np.argmin(np.abs(a)))
            raise InputError(f"degenerate reference cell {bad}")
        flip = a < 0
        if flip.any():
            C = C.copy()
            C[flip, 1], C[flip, 2] = C[flip, 2].copy(), C[flip, 1].copy()
        loops = boundary_loops(C)
        given = self.boundary
        if given is None or len(given) == 0:
            bd = tuple(loops)
        else:
            if isinstance(given, np.ndarray) and given.ndim == 1:
                given = (given,)
            elif len(given) and np.ndim(given[0]) == 0:
                given = (np.asarray(given),)
            bd = tuple(np.asarray(g, dtype=np.int64) for g in given)
            if set(np.concatenate(bd).tolist()) != set(np.concatenate(loops).tolist()):
                raise InputError("declared boundary does not match the mesh boundary")
        V.flags.writeable = False
        C.flags.writeable = False
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "cells", C)
        object.__setattr__(self, "boundary", bd)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def loops(self) -> List[np.ndarray]:
        return boundary_loops(self.cells)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(np.concatenate(self.loops))

    @cached_property
    def interior_vertices(self) -> np.ndarray:
        mask = np.ones(len(self.vertices), bool)
        mask[self.boundary_vertices] = False
        used = np.zeros(len(self.vertices), bool)
        used[self.cells.ravel()] = True
        return np.nonzero(mask & used)[0]

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * _cell_dets(self.vertices, self.cells)

    @cached_property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.cells].mean(axis=1)

    @cached_property
    def ref_inverse(self) -> np.ndarray:
        """Per-cell inverse of the reference edge matrix [x1-x0, x2-x0]."""
        X = self.vertices[self.cells]
        E = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=2)
        return np.linalg.inv(E)

    @cached_property
    def bbox(self) -> Tuple[float, float, float, float]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    @cached_property
    def locator(self) -> "Locator":
        return Locator(self.vertices, self.cells)

    def polygon(self):
        """Reference domain as a shapely polygon (outer loop plus holes)."""
        rings = [self.vertices[l] for l in self.loops]
        outer = max(rings, key=_signed_area)
        holes = [r for r in rings if r is not outer]
        return Polygon(outer, holes)


def _cell_dets(V: np.ndarray, C: np.ndarray) -> np.ndarray:
    X = V[C]
    a = X[:, 1] - X[:, 0]
    b = X[:, 2] - X[:, 0]
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


class Locator:
    """Point location: trapezoid map for the bulk of queries, a bucket grid
    with a small tolerance for points on (or a hair outside) edges."""

    def __init__(self, vertices: np.ndarray, cells: np.ndarray):
        self.V = vertices
        self.C = cells
        X = vertices[cells]
        self._x0 = X[:, 0]
        E = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=2)
        det = E[:, 0, 0] * E[:, 1, 1] - E[:, 0, 1] * E[:, 1, 0]
        self._Einv = np.stack([np.stack([E[:, 1, 1], -E[:, 0, 1]], 1),
                               np.stack([-E[:, 1, 0], E[:, 0, 0]], 1)], 1) / det[:, None, None]
        self._tf = None
        lo = vertices.min(axis=0)
        hi = vertices.max(axis=0)
        span = np.maximum(hi - lo, 1e-300)
        nb = max(1, int(np.sqrt(len(cells))))
        self._lo, self._span, self._nb = lo, span, nb
        self.scale = float(span.max())
        cmin = X.min(axis=1)
        cmax = X.max(axis=1)
        i0 = self._bucket_coord(cmin)
        i1 = self._bucket_coord(cmax)
        counts = (i1[:, 0] - i0[:, 0] + 1) * (i1[:, 1] - i0[:, 1] + 1)
        owner = np.repeat(np.arange(len(cells)), counts)
        # enumerate all (ix, iy) per cell without a Python loop
        start = np.repeat(np.cumsum(counts) - counts, counts)
        k = np.arange(counts.sum()) - start
        w = np.repeat(i1[:, 0] - i0[:, 0] + 1, counts)
        bx = np.repeat(i0[:, 0], counts) + k % w
        by = np.repeat(i0[:, 1], counts) + k // w
        bid = by * nb + bx
        order = np.argsort(bid, kind="stable")
        self._bcells = owner[order]
        self._bptr = np.searchsorted(bid[order], np.arange(nb * nb + 1))

    def _bucket_coord(self, P: np.ndarray) -> np.ndarray:
        ij = np.floor((P - self._lo) / self._span * self._nb).astype(np.int64)
        return np.clip(ij, 0, self._nb - 1)

    @property
    def trifinder(self):
        if self._tf is None:
            import matplotlib.tri as mtri
            tri = mtri.Triangulation(self.V[:, 0], self.V[:, 1], self.C)
            self._tf = tri.get_trifinder()
        return self._tf

    def barycentric(self, cell: np.ndarray, P: np.ndarray) -> np.ndarray:
        """(len, 3) barycentric coordinates of P w.r.t. the given cells."""
        st = np.einsum("nij,nj->ni", self._Einv[cell], P - self._x0[cell])
        return np.column_stack([1.0 - st[:, 0] - st[:, 1], st[:, 0], st[:, 1]])

    def locate(self, P: np.ndarray, tol: float = LOCATE_TOL) -> np.ndarray:
        P = np.asarray(P, float).reshape(-1, 2)
        try:
            cell = np.asarray(self.trifinder(P[:, 0], P[:, 1]), dtype=np.int64)
        except Exception:  # invalid triangulation for the trapezoid map
            cell = np.full(len(P), -1, dtype=np.int64)
        miss = np.nonzero(cell < 0)[0]
        if len(miss):
            cell[miss] = self._bucket_locate(P[miss], tol)
        return cell

    def _bucket_locate(self, P: np.ndarray, tol: float) -> np.ndarray:
        out = np.full(len(P), -1, dtype=np.int64)
        best = np.full(len(P), -np.inf)
        eps = tol * self.scale
        inside = np.all((P >= self._lo - eps) & (P <= self._lo + self._span + eps), axis=1)
        idx = np.nonzero(inside)[0]
        if not len(idx):
            return out
        b = self._bucket_coord(P[idx])
        bid = b[:, 1] * self._nb + b[:, 0]
        s, e = self._bptr[bid], self._bptr[bid + 1]
        kmax = int((e - s).max()) if len(s) else 0
        for k in range(kmax):
            act = np.nonzero(s + k < e)[0]
            c = self._bcells[s[act] + k]
            lam = self.barycentric(c, P[idx[act]])
            m = lam.min(axis=1)
            better = m > best[idx[act]]
            best[idx[act[better]]] = m[better]
            out[idx[act[better]]] = c[better]
        out[best < -tol * 10] = -1
        return out

    def cells_near_segment(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lo = self._bucket_coord(np.minimum(a, b) - 1e-12 * self.scale)
        hi = self._bucket_coord(np.maximum(a, b) + 1e-12 * self.scale)
        ids = [self._bcells[self._bptr[by * self._nb + bx]:self._bptr[by * self._nb + bx + 1]]
               for by in range(lo[1], hi[1] + 1) for bx in range(lo[0], hi[0] + 1)]
        return np.unique(np.concatenate(ids)) if ids else np.zeros(0, np.int64)


@dataclass(frozen=True, eq=False)
class PAMap:
    mesh: Mesh2
    images: np.ndarray

    def __post_init__(self):
        Y = np.ascontiguousarray(np.asarray(self.images, dtype=float))
        if Y.shape != (self.mesh.n_vertices, 2):
            raise InputError(f"images must have shape ({self.mesh.n_vertices}, 2), got {Y.shape}")
        if not np.all(np.isfinite(Y)):
            raise InputError("non-finite image coordinates")
        Y.flags.writeable = False
        object.__setattr__(self, "images", Y)

    @cached_property
    def gradients(self) -> np.ndarray:
        Y = self.images[self.mesh.cells]
        F = np.stack([Y[:, 1] - Y[:, 0], Y[:, 2] - Y[:, 0]], axis=2)
        return F @ self.mesh.ref_inverse

    @cached_property
    def dets(self) -> np.ndarray:
        return matgeom.det2(self.gradients)

    @cached_property
    def image_mesh(self) -> Mesh2:
        if not certify_injective(self):
            raise NumericalError("map is not certified injective; no inverse available")
        return Mesh2(self.images, self.mesh.cells)


def from_function(mesh: Mesh2, f) -> PAMap:
    """Nodal interpolant of a vectorised function f: (N, 2) -> (N, 2)."""
    return PAMap(mesh, np.asarray(f(mesh.vertices), float))


def affine_map(mesh: Mesh2, A, b=(0.0, 0.0)) -> PAMap:
    A = matgeom.as_mat2(A)
    return PAMap(mesh, mesh.vertices @ A.T + np.asarray(b, float))


def identity_map(mesh: Mesh2) -> PAMap:
    return PAMap(mesh, mesh.vertices.copy())


def eval_points(m: PAMap, X, cells: Optional[np.ndarray] = None) -> np.ndarray:
    """Evaluate the map at points X (shape (n, 2)); raises OutOfDomainError."""
    X = np.asarray(X, float).reshape(-1, 2)
    c = m.mesh.locator.locate(X) if cells is None else np.asarray(cells)
    if np.any(c < 0):
        bad = X[np.argmax(c < 0)]
        raise OutOfDomainError(f"point {bad.tolist()} is outside the mesh domain")
    lam = m.mesh.locator.barycentric(c, X)
    return np.einsum("nk,nkd->nd", lam, m.images[m.mesh.cells[c]])


def eval(m: PAMap, x) -> np.ndarray:  # noqa: A001 - mirrors the operation name
    return eval_points(m, np.asarray(x, float).reshape(1, 2))[0]


def gradient(m: PAMap, cell: int) -> np.ndarray:
    if not 0 <= cell < m.mesh.n_cells:
        raise InputError(f"cell index {cell} out of range")
    return m.gradients[cell].copy()


def gradient_at(m: PAMap, X) -> np.ndarray:
    c = m.mesh.locator.locate(np.asarray(X, float).reshape(-1, 2))
    if np.any(c < 0):
        raise OutOfDomainError("gradient query outside the mesh domain")
    return m.gradients[c]


def sample_points(mesh: Mesh2, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random points in the mesh domain."""
    p = mesh.areas / mesh.area
    c = rng.choice(mesh.n_cells, size=n, p=p)
    r = rng.random((n, 2))
    flip = r.sum(axis=1) > 1
    r[flip] = 1 - r[flip]
    X = mesh.vertices[mesh.cells[c]]
    return X[:, 0] + r[:, :1] * (X[:, 1] - X[:, 0]) + r[:, 1:] * (X[:, 2] - X[:, 0])


def bilip_constant(m: PAMap, n_pairs: int = 100_000, seed: int = 0) -> Tuple[float, float]:
    """(L_cell, L_sampled): per-cell upper bound and a sampled pairwise lower bound."""
    G = m.gradients
    smax, smin = matgeom.singular_values(G)
    if np.any(smin <= 0):
        raise NumericalError(f"cell {int(np.argmin(smin))} is singular; map is not bi-Lipschitz")
    L_cell = float(max(smax.max(), (1.0 / smin).max()))
    rng = np.random.default_rng(seed)
    X1 = sample_points(m.mesh, n_pairs, rng)
    # half the pairs are short (same neighbourhood), half span the domain
    h = np.sqrt(m.mesh.area / m.mesh.n_cells)
    X2 = sample_points(m.mesh, n_pairs, rng)
    short = np.arange(n_pairs) % 2 == 0
    cand = X1[short] + rng.normal(scale=0.3 * h, size=(short.sum(), 2))
    ok = m.mesh.locator.locate(cand) >= 0
    X2[np.nonzero(short)[0][ok]] = cand[ok]
    V = m.mesh.vertices
    Y1, Y2 = eval_points(m, X1), eval_points(m, X2)
    dx = np.linalg.norm(X1 - X2, axis=1)
    dy = np.linalg.norm(Y1 - Y2, axis=1)
    keep = dx > 1e-9 * m.mesh.locator.scale
    if np.any(dy[keep] == 0):
        return L_cell, float("inf")
    ratio = np.maximum(dy[keep] / dx[keep], dx[keep] / dy[keep])
    # vertex pairs along every mesh edge are exact on the edge
    e = m.mesh.cells[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    de = np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1)
    ye = np.linalg.norm(m.images[e[:, 0]] - m.images[e[:, 1]], axis=1)
    if np.any(ye == 0):
        return L_cell, float("inf")
    r_edge = np.maximum(ye / de, de / ye)
    return L_cell, float(max(ratio.max(initial=1.0), r_edge.max()))


def is_orientation_preserving(m: PAMap) -> bool:
    return bool(np.all(m.dets > 0))


def injectivity_report(m: PAMap) -> dict:
    """Certification details: determinant sign per cell and boundary simplicity."""
    dets = m.dets
    rep = {
        "orientation_preserving": bool(np.all(dets > 0)),
        "min_det": float(dets.min()),
        "n_nonpositive": int(np.sum(dets <= 0)),
        "boundary_simple": True,
        "witness": None,
    }
    rings = []
    for loop in m.mesh.loops:
        P = m.images[loop]
        ring = LinearRing(P)
        if len(np.unique(P, axis=0)) < len(P) or not ring.is_simple:
            rep["boundary_simple"] = False
            rep["witness"] = _self_intersection_witness(P)
            break
        rings.append(ring)
    if rep["boundary_simple"] and len(rings) > 1:
        tree = shapely.STRtree(rings)
        for i, ring in enumerate(rings):
            for j in tree.query(ring):
                if j > i and ring.intersects(rings[j]):
                    rep["boundary_simple"] = False
                    pt = ring.intersection(rings[j]).representative_point()
                    rep["witness"] = [pt.x, pt.y]
                    break
            if not rep["boundary_simple"]:
                break
    if rep["orientation_preserving"] and rep["boundary_simple"]:
        # the outer image loop (the CCW reference loop) must be positively oriented
        V = m.mesh.vertices
        outer = max(m.mesh.loops, key=lambda l: _signed_area(V[l]))
        if _signed_area(m.images[outer]) <= 0:
            rep["boundary_simple"] = False
    rep["injective"] = rep["orientation_preserving"] and rep["boundary_simple"]
    return rep


def _self_intersection_witness(P: np.ndarray):
    msg = explain_validity(Polygon(P))
    mt = re.search(r"\[([-0-9.eE+]+) ([-0-9.eE+]+)\]", msg)
    if mt:
        return [float(mt.group(1)), float(mt.group(2))]
    _, idx, cnt = np.unique(P, axis=0, return_index=True, return_counts=True)
    if np.any(cnt > 1):
        return P[idx[np.argmax(cnt)]].tolist()
    return None


def certify_injective(m: PAMap) -> bool:
    return injectivity_report(m)["injective"]


def inverse_eval(m: PAMap, ypt) -> np.ndarray:
    """Preimage of image points (one point -> (2,), many -> (n, 2))."""
    Yq = np.asarray(ypt, float)
    single = Yq.ndim == 1
    Yq = Yq.reshape(-1, 2)
    im = m.image_mesh
    c = im.locator.locate(Yq)
    if np.any(c < 0):
        bad = Yq[np.argmax(c < 0)]
        raise OutOfDomainError(f"point {bad.tolist()} is outside the image polygon")
    lam = im.locator.barycentric(c, Yq)
    X = np.einsum("nk,nkd->nd", lam, m.mesh.vertices[m.mesh.cells[c]])
    return X[0] if single else X


def inverse_gradient_at(m: PAMap, ypt) -> np.ndarray:
    im = m.image_mesh
    c = im.locator.locate(np.asarray(ypt, float).reshape(-1, 2))
    if np.any(c < 0):
        raise OutOfDomainError("point outside the image polygon")
    return np.linalg.inv(m.gradients[c])


def rescale(m: PAMap, center, eps: float) -> PAMap:
    """u_eps(x) = c + eps * u((x - c) / eps) on the domain c + eps (Omega - c)."""
    if not eps > 0:
        raise InputError(f"rescale factor must be positive, got {eps}")
    c = np.asarray(center, float)
    V = c + eps * (m.mesh.vertices - c)
    Y = c + eps * (m.images - c)
    return PAMap(Mesh2(V, m.mesh.cells, m.mesh.boundary), Y)


def restrict_to_segment(m: PAMap, a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Exact restriction of the map to the segment a -> b.

    Returns breakpoints t (sorted, including 0 and 1) and image values there;
    the map is affine in t between consecutive breakpoints.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    loc = m.mesh.locator
    cand = loc.cells_near_segment(a, b)
    d = b - a
    X = m.mesh.vertices[m.mesh.cells[cand]]
    t0 = np.zeros(len(cand))
    t1 = np.ones(len(cand))
    ok = np.ones(len(cand), bool)
    tol = 1e-12
    for k in range(3):
        p, q = X[:, k], X[:, (k + 1) % 3]
        e = q - p
        # inward normal of a CCW triangle edge is (-e_y, e_x)
        nrm = np.column_stack([-e[:, 1], e[:, 0]])
        nlen = np.linalg.norm(nrm, axis=1)
        f0 = np.einsum("ij,ij->i", nrm, a - p) / nlen
        fd = np.einsum("ij,j->i", nrm, d) / nlen
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = -f0 / fd
        par = np.abs(fd) <= 1e-15
        ok &= ~(par & (f0 < -tol * loc.scale))
        up = (~par) & (fd > 0)
        dn = (~par) & (fd < 0)
        t0 = np.where(up, np.maximum(t0, tc), t0)
        t1 = np.where(dn, np.minimum(t1, tc), t1)
    ok &= t1 >= t0 - tol
    T = np.unique(np.clip(np.concatenate([[0.0, 1.0], t0[ok], t1[ok]]), 0.0, 1.0))
    # merge breakpoints closer than the tolerance
    keep = np.concatenate([[True], np.diff(T) > 1e-13])
    T = T[keep]
    T[-1] = 1.0
    P = a + T[:, None] * d
    return T, eval_points(m, P)
