"""Certified piecewise-affine extension of a boundary map of a square.

The interior nodes of an n x n triangulated square are placed with
mean-value-coordinate weights (positive weights with linear precision, so
affine boundary data is reproduced exactly). If a cell folds, the interior
nodes are moved by minimising a regularised barrier energy, then single
vertices are relocated to reduce the largest incident distortion.

The existence theorem behind this step gives a C L^4 bi-Lipschitz extension
with C <= 81 * 63600. That bound is reported next to the measured constant
and never asserted of the numerical output.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import spsolve
from shapely.geometry import LinearRing

from . import matgeom
from .errors import InputError, NumericalError
from .pamap import Mesh2, PAMap, injectivity_report

EXTENSION_CONSTANT = 81 * 63600
DEFAULT_BUDGET = 10_000


def theoretical_bound(L: float) -> float:
    return EXTENSION_CONSTANT * L ** 4


class ExtensionError(NumericalError):
    def __init__(self, msg: str, best: Optional[PAMap] = None):
        super().__init__(msg)
        self.best = best
        self.used = 0


@dataclass(frozen=True, eq=False)
class BoundaryData:
    """Boundary samples of a map on the square with the given center and half-size.

    ``params`` run counter-clockwise over [0, 4) from the lower-left corner,
    one unit per side.
    """
    center: np.ndarray
    half: float
    params: np.ndarray
    images: np.ndarray
    L: float = float("inf")

    def __post_init__(self):
        p = np.asarray(self.params, float)
        Y = np.asarray(self.images, float)
        if p.ndim != 1 or Y.shape != (len(p), 2) or len(p) < 4:
            raise InputError("boundary data needs >= 4 samples with (u, v) images")
        if np.any(p < 0) or np.any(p >= 4) or np.any(np.diff(p) <= 0):
            raise InputError("boundary parameters must increase strictly within [0, 4)")
        if not self.half > 0:
            raise InputError("square half-size must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, float))
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "images", Y)

    def positions(self) -> np.ndarray:
        return param_to_point(self.params, self.center, self.half)

    def validate(self) -> None:
        if not LinearRing(self.images).is_simple:
            raise InputError("boundary image is not a simple closed curve")
        if _signed_area(self.images) <= 0:
            raise InputError("boundary image is negatively oriented")
        if np.isfinite(self.L):
            X = self.positions()
            dx = np.linalg.norm(X[:, None] - X[None], axis=2)
            dy = np.linalg.norm(self.images[:, None] - self.images[None], axis=2)
            iu = np.triu_indices(len(X), 1)
            ratio = np.maximum(dy[iu] / dx[iu], dx[iu] / dy[iu])
            if ratio.max() > self.L * (1 + 1e-9):
                raise InputError(f"sampled boundary distortion {ratio.max():.4g} exceeds declared L={self.L}")

    def to_json(self) -> dict:
        return {"schema": "bdata.v1", "center": self.center.tolist(), "half": self.half,
                "L": None if not np.isfinite(self.L) else self.L,
                "samples": [[float(s), float(y[0]), float(y[1])] for s, y in zip(self.params, self.images)]}

    @classmethod
    def from_json(cls, d: dict) -> "BoundaryData":
        try:
            S = np.asarray(d["samples"], float)
            L = d.get("L")
            return cls(np.asarray(d["center"], float), float(d["half"]), S[:, 0], S[:, 1:3],
                       float("inf") if L is None else float(L))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InputError(f"malformed bdata.v1 document: {exc}") from exc

    @classmethod
    def from_map(cls, f, center, half: float, per_side: int, L: float = float("inf")) -> "BoundaryData":
        """Sample a vectorised function f at per_side equispaced points per side."""
        p = np.arange(4 * per_side) / per_side
        X = param_to_point(p, center, half)
        return cls(np.asarray(center, float), half, p, np.asarray(f(X), float), L)


def _signed_area(P: np.ndarray) -> float:
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def param_to_point(p: np.ndarray, center, half: float) -> np.ndarray:
    p = np.asarray(p, float)
    c = np.asarray(center, float)
    side = np.floor(p).astype(int) % 4
    s = p - np.floor(p)
    corners = c + half * np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float)
    dirs = np.array([[1, 0], [0, 1], [-1, 0], [0, -1]], float) * 2 * half
    return corners[side] + s[:, None] * dirs[side]


def point_to_param(X: np.ndarray, center, half: float) -> np.ndarray:
    """Inverse of param_to_point for points on the square boundary."""
    c = np.asarray(center, float)
    u = (np.asarray(X, float) - c) / half  # in [-1, 1]^2
    tol = 1e-9
    p = np.empty(len(u))
    bottom = np.abs(u[:, 1] + 1) <= tol
    right = ~bottom & (np.abs(u[:, 0] - 1) <= tol)
    top = ~bottom & ~right & (np.abs(u[:, 1] - 1) <= tol)
    left = ~bottom & ~right & ~top & (np.abs(u[:, 0] + 1) <= tol)
    if not np.all(bottom | right | top | left):
        raise InputError("boundary sample not on the square boundary")
    p[bottom] = (u[bottom, 0] + 1) / 2
    p[right] = 1 + (u[right, 1] + 1) / 2
    p[top] = 2 + (1 - u[top, 0]) / 2
    p[left] = 3 + (1 - u[left, 1]) / 2
    p[left & (p >= 4 - 1e-12)] = 0.0
    return p


def _square_mesh(center, half: float, n: int, bpos: np.ndarray, bparam: np.ndarray):
    """Reference mesh of the square whose boundary nodes are exactly bpos.

    bpos must contain the 4n uniform boundary nodes (in CCW order starting at
    the lower-left corner). Extra boundary nodes are fanned into the boundary
    triangle that owns their segment.
    Returns (vertices, cells, boundary_ids (order of bpos), interior_ids).
    """
    c = np.asarray(center, float)
    h = 2 * half / n
    k = np.arange(n + 1)
    xs = c[0] - half + k * h
    ys = c[1] - half + k * h
    xs[-1] = c[0] + half
    ys[-1] = c[1] + half
    uni = np.round(bparam * n)
    is_uni = np.abs(bparam * n - uni) <= 1e-9
    # grid node (i, j) -> index; boundary grid nodes take the bpos positions
    gid = -np.ones((n + 1, n + 1), np.int64)
    V = [bpos]
    nb = len(bpos)
    # boundary uniform param q -> (i, j)
    q = uni[is_uni].astype(int)
    side, s = q // n, q % n
    ij = np.where(side[:, None] == 0, np.column_stack([s, np.zeros_like(s)]),
         np.where(side[:, None] == 1, np.column_stack([np.full_like(s, n), s]),
         np.where(side[:, None] == 2, np.column_stack([n - s, np.full_like(s, n)]),
                  np.column_stack([np.zeros_like(s), n - s]))))
    gid[ij[:, 0], ij[:, 1]] = np.nonzero(is_uni)[0]
    if np.sum(is_uni) != 4 * n or np.any(gid[[0, n], :] < 0) or np.any(gid[:, [0, n]] < 0):
        raise InputError("boundary samples must include the uniform boundary nodes")
    ii, jj = np.mgrid[1:n, 1:n]
    interior = np.arange(nb, nb + (n - 1) ** 2)
    gid[ii.ravel(), jj.ravel()] = interior
    V.append(np.column_stack([xs[ii.ravel()], ys[jj.ravel()]]))
    V = np.concatenate(V)
    i, j = np.mgrid[0:n, 0:n]
    i, j = i.ravel(), j.ravel()
    a, b, cc, d = gid[i, j], gid[i + 1, j], gid[i + 1, j + 1], gid[i, j + 1]
    cells = np.concatenate([np.column_stack([a, b, cc]), np.column_stack([a, cc, d])])
    # extra boundary nodes: find owning segment (between consecutive uniform nodes)
    extra = np.nonzero(~is_uni)[0]
    if len(extra):
        cells = [list(t) for t in cells]
        seg_of = np.floor(bparam[extra] * n).astype(int)
        owner = {}
        for t_idx, t in enumerate(cells):
            for m in range(3):
                owner[(t[m], t[(m + 1) % 3])] = (t_idx, m)
        groups = {}
        for e, sgi in zip(extra, seg_of):
            groups.setdefault(int(sgi), []).append(int(e))
        # triangle -> {local edge: inserted nodes}
        per_tri: dict = {}
        for sgi, ids in groups.items():
            p0 = gid_of_uniform(gid, sgi, n)
            p1 = gid_of_uniform(gid, (sgi + 1) % (4 * n), n)
            t_idx, m = owner[(p0, p1)]
            per_tri.setdefault(t_idx, {})[m] = sorted(ids, key=lambda e: bparam[e])
        replace = {}
        newV = []
        nid = len(V)
        for t_idx, edges in per_tri.items():
            t = cells[t_idx]
            if len(edges) == 1:
                # fan from the vertex opposite the subdivided edge
                (m, ids), = edges.items()
                chain = [t[m]] + ids + [t[(m + 1) % 3]]
                opp = t[(m + 2) % 3]
            else:
                # a corner triangle with two subdivided edges: fan from its centroid
                chain = []
                for m in range(3):
                    chain += [t[m]] + edges.get(m, [])
                chain.append(t[0])
                opp = nid
                newV.append(V[t].mean(axis=0))
                nid += 1
            replace[t_idx] = [[chain[r], chain[r + 1], opp] for r in range(len(chain) - 1)]
        out = []
        for t_idx, t in enumerate(cells):
            out.extend(replace.get(t_idx, [t]))
        cells = np.asarray(out, np.int64)
        if newV:
            V = np.vstack([V] + [v[None] for v in newV])
            interior = np.concatenate([interior, np.arange(len(V) - len(newV), len(V))])
    return V, cells, np.arange(nb), interior


def gid_of_uniform(gid: np.ndarray, q: int, n: int) -> int:
    side, s = divmod(q, n)
    if side == 0:
        return int(gid[s, 0])
    if side == 1:
        return int(gid[n, s])
    if side == 2:
        return int(gid[n - s, n])
    return int(gid[0, n - s])


def mean_value_weights(V: np.ndarray, C: np.ndarray):
    """Sparse (row, col, weight) triplets of mean-value coordinates."""
    rows, cols, w = [], [], []
    for k in range(3):
        i, j, l = C[:, k], C[:, (k + 1) % 3], C[:, (k + 2) % 3]
        u = V[j] - V[i]
        v = V[l] - V[i]
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        cr = u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]
        dt = np.einsum("ij,ij->i", u, v)
        tan_half = (nu * nv - dt) / cr
        rows += [i, i]
        cols += [j, l]
        w += [tan_half / nu, tan_half / nv]
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(w)


def harmonic_place(V: np.ndarray, C: np.ndarray, bids: np.ndarray, bimg: np.ndarray,
                   interior: np.ndarray) -> np.ndarray:
    N = len(V)
    r, c, w = mean_value_weights(V, C)
    W = coo_matrix((w, (r, c)), shape=(N, N)).tocsr()
    deg = np.asarray(W.sum(axis=1)).ravel()
    Y = np.zeros((N, 2))
    Y[bids] = bimg
    if len(interior) == 0:
        return Y
    WI = W[interior]
    A = (WI[:, interior] - coo_matrix((deg[interior], (np.arange(len(interior)), np.arange(len(interior)))),
                                      shape=(len(interior), len(interior)))).tocsc()
    rhs = -(WI[:, bids] @ bimg)
    Y[interior] = spsolve(A, rhs).reshape(-1, 2)
    return Y


def _incident(C: np.ndarray, N: int) -> List[np.ndarray]:
    order = np.argsort(C.ravel(), kind="stable")
    owner = order // 3
    ptr = np.searchsorted(C.ravel()[order], np.arange(N + 1))
    return [owner[ptr[v]:ptr[v + 1]] for v in range(N)]


def _rotated(C: np.ndarray, cells: np.ndarray, v: int) -> np.ndarray:
    """Incident cells rotated so v comes first: rows (v, a, b)."""
    T = C[cells]
    pos = np.argmax(T == v, axis=1)
    return np.stack([T[np.arange(len(T)), (pos + s) % 3] for s in range(3)], axis=1)


def _cell_grads(V, Y, C):
    X = V[C]
    E = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=2)
    F = np.stack([Y[C][:, 1] - Y[C][:, 0], Y[C][:, 2] - Y[C][:, 0]], axis=2)
    return F @ np.linalg.inv(E)


def _barrier_energy(V, C, interior, Yfix, eps, Einv, w):
    """Regularised distortion energy sum_k w_k |G_k|^2 / (2 chi(det G_k, eps))
    with chi(D, eps) = (D + sqrt(eps^2 + D^2)) / 2, and its gradient in the
    interior positions."""
    def fun(x):
        Y = Yfix.copy()
        Y[interior] = x.reshape(-1, 2)
        P = Y[C]
        E = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
        G = E @ Einv
        D = matgeom.det2(G)
        sq = np.sqrt(eps * eps + D * D)
        chi = 0.5 * (D + sq)
        num = 0.5 * np.sum(G * G, axis=(1, 2))
        f = float(np.sum(w * num / chi))
        dchi = 0.5 * (1 + D / sq)
        cof = np.stack([np.stack([G[:, 1, 1], -G[:, 1, 0]], 1), np.stack([-G[:, 0, 1], G[:, 0, 0]], 1)], 1)
        dG = (w / chi)[:, None, None] * G - (w * num * dchi / chi ** 2)[:, None, None] * cof
        dE = dG @ np.transpose(Einv, (0, 2, 1))
        g = np.zeros_like(Y)
        np.add.at(g, C[:, 1], dE[:, :, 0])
        np.add.at(g, C[:, 2], dE[:, :, 1])
        np.add.at(g, C[:, 0], -dE[:, :, 0] - dE[:, :, 1])
        return f, g[interior].ravel()
    return fun


def untangle(V: np.ndarray, Y: np.ndarray, C: np.ndarray, interior: np.ndarray,
             budget: int = DEFAULT_BUDGET) -> Tuple[np.ndarray, int]:
    """Move interior vertices until every cell has positive image area.

    Global L-BFGS on a regularised barrier energy; the regularisation eps is
    decreased between rounds, following the minimal determinant. Returns the
    new images and the number of optimiser iterations used.
    """
    Y = Y.copy()
    interior = np.asarray(interior, np.int64)
    P = V[C]
    R = np.stack([P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]], axis=2)
    Einv = np.linalg.inv(R)
    w = 0.5 * np.abs(matgeom.det2(R))
    w = w / w.sum()
    # scale so that a typical determinant is O(1)
    used = 0
    D = matgeom.det2(_cell_grads(V, Y, C))
    eps = max(float(np.median(np.abs(D))), 1e-12)
    for _ in range(60):
        if used >= budget:
            break
        fun = _barrier_energy(V, C, interior, Y, eps, Einv, w)
        res = minimize(fun, Y[interior].ravel(), jac=True, method="L-BFGS-B",
                       options={"maxiter": max(1, min(500, budget - used)), "gtol": 1e-12, "ftol": 1e-15})
        used += max(1, int(res.nit))
        Y[interior] = res.x.reshape(-1, 2)
        D = matgeom.det2(_cell_grads(V, Y, C))
        dmin = float(D.min())
        if dmin > 0:
            break
        eps = max(0.5 * eps, 1e-14)
    return Y, used


def reduce_distortion(V, Y, C, interior, budget: int, sweeps: int = 3) -> Tuple[np.ndarray, int]:
    """Local relocation minimising the largest incident distortion with a
    determinant barrier (positions with a non-positive determinant are rejected)."""
    Y = Y.copy()
    inc = _incident(C, len(V))
    used = 0
    for _ in range(sweeps):
        dist = matgeom.distortion(_cell_grads(V, Y, C))
        worst = np.argsort(-dist)
        cand = []
        seen = set()
        for c in worst[: max(1, len(worst) // 10)]:
            for v in C[c]:
                if v in interior and int(v) not in seen:
                    seen.add(int(v))
                    cand.append(int(v))
        interior_set = set(int(v) for v in interior)
        cand = [v for v in cand if v in interior_set]
        for v in cand:
            if used >= budget:
                return Y, used
            cells = inc[v]

            def f(p):
                Y[v] = p
                G = _cell_grads(V, Y, C[cells])
                if np.any(matgeom.det2(G) <= 0):
                    return 1e300
                return float(matgeom.distortion(G).max())

            p0 = Y[v].copy()
            f0 = f(p0)
            res = minimize(f, p0, method="Nelder-Mead",
                           options={"xatol": 1e-12, "fatol": 1e-12, "maxiter": 200})
            used += 1
            if res.fun < f0:
                Y[v] = res.x
            else:
                Y[v] = p0
    return Y, used


def extend_boundary(center, half: float, bpos: np.ndarray, bimg: np.ndarray, n: int = 16,
                    budget: int = DEFAULT_BUDGET, max_refine: int = 2) -> Tuple[PAMap, float, dict]:
    """Extension from explicit boundary nodes (CCW from the lower-left corner).

    If the n x n mesh cannot be certified, the grid is refined (2n, 4n, ...)
    up to ``max_refine`` times; the vertex-update budget is shared.
    Returns (map, measured_L, info). Raises ExtensionError on failure.
    """
    if n < 1:
        raise InputError("grid resolution n must be >= 1")
    last = None
    left = budget
    for level in range(max_refine + 1):
        nn = n * 2 ** level
        try:
            m, L, info = _extend_once(center, half, bpos, bimg, nn, left)
            info["n_used"] = nn
            return m, L, info
        except ExtensionError as exc:
            last = exc
            left -= exc.used
            if left <= 0:
                break
    raise last


def _extend_once(center, half, bpos, bimg, n, budget):
    bpos = np.asarray(bpos, float)
    bimg = np.asarray(bimg, float)
    bparam = point_to_param(bpos, center, half)
    # add missing uniform nodes with images interpolated along the polyline
    uni = np.arange(4 * n) / n
    have = np.abs(bparam[:, None] * n - np.arange(4 * n)[None, :]).min(axis=0) <= 1e-9
    if not np.all(have):
        pp = np.concatenate([bparam, [4.0]])
        yy = np.vstack([bimg, bimg[:1]])
        add = uni[~have]
        addimg = np.column_stack([np.interp(add, pp, yy[:, 0]), np.interp(add, pp, yy[:, 1])])
        allp = np.concatenate([bparam, add])
        o = np.argsort(allp, kind="stable")
        bparam = allp[o]
        bpos = np.vstack([bpos, param_to_point(add, center, half)])[o]
        bimg = np.vstack([bimg, addimg])[o]
    V, C, bids, interior = _square_mesh(center, half, n, bpos, bparam)
    # solve in the frame of the unit square so the result commutes with rescaling
    c = np.asarray(center, float)
    Vn = (V - c) / half
    Yn = harmonic_place(Vn, C, bids, (bimg - c) / half, interior)
    info = {"untangle_updates": 0, "distortion_updates": 0, "harmonic_ok": True}
    used = 0
    if not np.all(PAMap(Mesh2(Vn, C), Yn).dets > 0):
        info["harmonic_ok"] = False
        Yn, used = untangle(Vn, Yn, C, interior, budget)
        info["untangle_updates"] = used
        if np.all(PAMap(Mesh2(Vn, C), Yn).dets > 0) and budget - used > 0:
            Yd, used2 = reduce_distortion(Vn, Yn, C, interior, budget - used)
            used += used2
            info["distortion_updates"] = used2
            if np.all(PAMap(Mesh2(Vn, C), Yd).dets > 0):
                Yn = Yd
    Y = c + half * Yn
    Y[bids] = bimg
    m = PAMap(Mesh2(V, C), Y)
    rep = injectivity_report(m)
    if not rep["injective"]:
        err = ExtensionError(f"extension not certified at n={n} (min det {rep['min_det']:.3e}, "
                             f"boundary simple {rep['boundary_simple']})", best=m)
        err.used = max(used, 1)
        raise err
    smax, smin = matgeom.singular_values(m.gradients)
    measured = float(max(smax.max(), (1 / smin).max()))
    return m, measured, info


def extend_square(bd: BoundaryData, n: int = 16, budget: int = DEFAULT_BUDGET) -> Tuple[PAMap, float]:
    """Certified injective extension of boundary data to the square."""
    bd.validate()
    m, L, _ = extend_boundary(bd.center, bd.half, bd.positions(), bd.images, n, budget)
    return m, L


def extend_all_squares(em, grid, n: int = 16, jobs: int = 1,
                       budget: int = DEFAULT_BUDGET) -> Tuple[List[PAMap], List[float]]:
    """Extend an edge map square by square over the tiled strip.

    ``em.square_boundary(k)`` must return (positions, images) of square k's
    boundary nodes, CCW from its lower-left corner. Adjacent squares read the
    same edge samples, so shared edges agree exactly.
    """
    squares = grid.squares

    def one(k):
        center, half = squares[k]
        pos, img = em.square_boundary(k)
        try:
            m, L, _ = extend_boundary(center, half, pos, img, n, budget)
        except (ExtensionError, InputError) as exc:
            return k, None, str(exc)
        return k, (m, L), None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(one, range(len(squares))))
    else:
        results = [one(k) for k in range(len(squares))]
    failures = [(k, msg) for k, res, msg in results if res is None]
    if failures:
        detail = "; ".join(f"square {k}: {msg}" for k, msg in failures[:5])
        raise ExtensionError(f"{len(failures)} square extension(s) failed: {detail}")
    maps = [res[0] for _, res, _ in results]
    Ls = [res[1] for _, res, _ in results]
    return maps, Ls
