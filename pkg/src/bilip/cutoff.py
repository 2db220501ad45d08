"""Grid cut-off: glue a map y on the boundary layer to a close map ytilde in the bulk.

Given L-bi-Lipschitz piecewise-affine maps ytilde and y with
sup |ytilde - y| <= r / (12 L^3) on the tiled strip, a boundary cross is
placed at every Gamma vertex w. On arm i the map is interpolated linearly
in the arm parameter from y(w) to f(p_i), where f = ytilde on INNER arms
and f = y otherwise, and p_i is the extremal point at which
|f - y(w)| = r / (4L). Off the crosses the edge map is ytilde on INNER
edges and y on OUTER and Gamma edges. The edge map is extended square by
square and glued to ytilde on the bulk and to y on the boundary collar.

Input maps must be lattice compatible: every cell of ytilde (resp. y) that
is used lies inside one partition class of the tiling.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from scipy.spatial import cKDTree

from . import extension, matgeom
from .errors import InputError, NumericalError, PreconditionError
from .meshes import assemble
from .pamap import (Mesh2, PAMap, eval_points, gradient_at, injectivity_report,
                    restrict_to_segment)
from .tiling import (BOUND, BULK, GAMMA, INNER, OUTER, STRIP, Domain2, GridComplex,
                     build_tiling)

XI_SCAN = 10_000
XI_TOL = 1e-10
CONTINUITY_TOL = 1e-9
ARM_SAMPLES = 8
STEP_BOUNDS = {
    "step1_same_arm": 2.0,
    "step1_cross": 2.0 * np.sqrt(2.0),
    "step2": 2.0,
    "step3": 6.0,
    "step4": 18.0,
}


def _check_L(L: float) -> None:
    if not L >= 1:
        raise InputError(f"bi-Lipschitz constant L must be >= 1, got {L}")


def closeness_level(r: float, L: float) -> float:
    return r / (12.0 * L ** 3)


def _probe_points(ytilde: PAMap, y: PAMap, grid: GridComplex) -> np.ndarray:
    V = grid.vertices
    mid = 0.5 * (V[grid.edges[:, 0]] + V[grid.edges[:, 1]])
    return np.vstack([ytilde.mesh.vertices, y.mesh.vertices, V, mid])


def sup_distance(ytilde: PAMap, y: PAMap, grid: GridComplex) -> float:
    """max |ytilde - y| over both meshes' vertices and the grid points."""
    P = _probe_points(ytilde, y, grid)
    a = ytilde.mesh.locator.locate(P)
    b = y.mesh.locator.locate(P)
    P = P[(a >= 0) & (b >= 0)]
    d = np.linalg.norm(eval_points(ytilde, P) - eval_points(y, P), axis=1)
    return float(d.max(initial=0.0))


def check_closeness(ytilde: PAMap, y: PAMap, grid: GridComplex, L: float) -> bool:
    """Closed inequality sup |ytilde - y| <= r / (12 L^3)."""
    _check_L(L)
    return sup_distance(ytilde, y, grid) <= closeness_level(grid.r, L)


def xi_bounds(L: float) -> Tuple[float, float]:
    return 1.0 / (6.0 * L * L), 1.0 / 3.0


def find_xi(w, arm, inner: bool, ytilde: PAMap, y: PAMap, r: float, L: float,
            yw: Optional[np.ndarray] = None, n_scan: int = XI_SCAN) -> float:
    """Largest t in (0, 1] with |f(w + t r arm) - y(w)| = r / (4L).

    The restriction of f to the arm is exact (piecewise affine in t); the
    largest root is bracketed by a descending scan over n_scan samples and
    refined by bisection to 1e-10.
    """
    _check_L(L)
    w = np.asarray(w, float)
    d = np.asarray(arm, float)
    d = d / np.linalg.norm(d)
    f = ytilde if inner else y
    if yw is None:
        yw = eval_points(y, w[None])[0]
    T, vals = restrict_to_segment(f, w, w + r * d)
    level = r / (4.0 * L)

    def g(t):
        u = np.interp(t, T, vals[:, 0]) - yw[0]
        v = np.interp(t, T, vals[:, 1]) - yw[1]
        return np.hypot(u, v) - level

    ts = np.linspace(0.0, 1.0, n_scan + 1)
    gv = g(ts)
    sign = np.sign(gv)
    change = np.nonzero((sign[1:] != sign[:-1]) | (sign[1:] == 0))[0]
    if not len(change):
        raise PreconditionError(f"no root of |f - y(w)| = r/(4L) on the arm from {w.tolist()}: "
                                "closeness is violated")
    k = int(change[-1])
    if gv[k + 1] == 0:
        xi = float(ts[k + 1])
    else:
        lo, hi = ts[k], ts[k + 1]
        slo = np.sign(gv[k])
        while hi - lo > XI_TOL:
            mid = 0.5 * (lo + hi)
            gm = g(mid)
            if gm == 0:
                lo = hi = mid
                break
            if np.sign(gm) == slo:
                lo = mid
            else:
                hi = mid
        xi = float(0.5 * (lo + hi))
    a, b = xi_bounds(L)
    if not (a - 1e-12 <= xi <= b + 1e-12):
        raise PreconditionError(f"xi={xi:.6g} outside [{a:.6g}, {b:.6g}] at {w.tolist()}: "
                                "the closeness precondition is broken")
    return xi


@dataclass(frozen=True, eq=False)
class BoundaryCross:
    vertex: int
    w: np.ndarray
    neighbours: Tuple[int, ...]
    arms: np.ndarray        # (4, 2) unit directions, E N W S
    xi: np.ndarray          # (4,)
    extremals: np.ndarray   # (4, 2) p_i = w + xi_i (w_i - w)
    inner: np.ndarray       # (4,) arm edge is INNER
    y_w: np.ndarray         # y(w)
    f_p: np.ndarray         # (4, 2) f(p_i)

    def arm_of(self, nb: int) -> int:
        return self.neighbours.index(nb)

    def to_json(self) -> dict:
        return {"vertex": self.vertex, "w": self.w.tolist(), "neighbours": list(self.neighbours),
                "xi": self.xi.tolist(), "extremals": self.extremals.tolist(),
                "inner": [bool(b) for b in self.inner]}


def build_crosses(grid: GridComplex, ytilde: PAMap, y: PAMap, L: float) -> List[BoundaryCross]:
    """One cross per Gamma vertex."""
    _check_L(L)
    V = grid.vertices
    gv = grid.gamma_vertices
    Yw = eval_points(y, V[gv])
    out = []
    for v, yw in zip(gv, Yw):
        v = int(v)
        nbs = grid.neighbours(v)
        if len(nbs) != 4:
            raise InputError(f"Gamma vertex {v} has {len(nbs)} grid neighbours, expected 4")
        w = V[v]
        arms = (V[nbs] - w) / grid.r
        inner = np.array([grid.label_of(v, b) == INNER for b in nbs])
        xi = np.empty(4)
        for i in range(4):
            try:
                xi[i] = find_xi(w, arms[i], bool(inner[i]), ytilde, y, grid.r, L, yw=yw)
            except PreconditionError as exc:
                raise PreconditionError(f"Gamma vertex {v}, arm {i}: {exc}") from exc
        P = w + xi[:, None] * (V[nbs] - w)
        fp = np.empty((4, 2))
        if inner.any():
            fp[inner] = eval_points(ytilde, P[inner])
        if (~inner).any():
            fp[~inner] = eval_points(y, P[~inner])
        out.append(BoundaryCross(v, w.copy(), tuple(int(b) for b in nbs), arms, xi, P, inner,
                                 yw.copy(), fp))
    return out


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """u_delta on the grid Q: per edge (a, b) sorted samples s in [0, 1] from a to b."""
    grid: GridComplex
    crosses: Tuple[BoundaryCross, ...]
    s: Tuple[np.ndarray, ...]
    values: Tuple[np.ndarray, ...]
    # (edge, s0, s1, cross index or -1, arm index or -1)
    segments: np.ndarray = field(repr=False)

    def __post_init__(self):
        keys = np.concatenate([2 * e + s for e, s in enumerate(self.s)])
        vals = np.concatenate(self.values)
        object.__setattr__(self, "_keys", keys)
        object.__setattr__(self, "_vals", vals)

    def positions(self, edges: np.ndarray, s: np.ndarray) -> np.ndarray:
        V = self.grid.vertices
        E = self.grid.edges[np.asarray(edges)]
        s = np.asarray(s, float)
        return V[E[:, 0]] + s[:, None] * (V[E[:, 1]] - V[E[:, 0]])

    def eval(self, edges: np.ndarray, s: np.ndarray) -> np.ndarray:
        k = 2 * np.asarray(edges, float) + np.asarray(s, float)
        return np.column_stack([np.interp(k, self._keys, self._vals[:, 0]),
                                np.interp(k, self._keys, self._vals[:, 1])])

    def square_boundary(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Boundary nodes of strip square k, CCW from its lower-left corner."""
        i, j = (int(v) for v in self.grid.strip_squares[k])
        vi = self.grid.vertex_index
        corners = [vi[(i, j)], vi[(i + 1, j)], vi[(i + 1, j + 1)], vi[(i, j + 1)]]
        pos, img = [], []
        for c in range(4):
            a, b = corners[c], corners[(c + 1) % 4]
            e = self.grid.edge_between(a, b)
            s, Y = self.s[e], self.values[e]
            if a > b:
                s, Y = 1.0 - s[::-1], Y[::-1]
                P = self.positions(np.full(len(s), e), 1.0 - s)
            else:
                P = self.positions(np.full(len(s), e), s)
            pos.append(P[:-1])
            img.append(Y[:-1])
        return np.vstack(pos), np.vstack(img)

    def to_json(self) -> dict:
        return {"schema": "edgemap.v1",
                "edges": [{"edge": e, "s": s.tolist(), "values": v.tolist()}
                          for e, (s, v) in enumerate(zip(self.s, self.values))]}


def _merge_samples(cand: np.ndarray, prio: np.ndarray, tol: float) -> np.ndarray:
    o = np.lexsort((-prio, cand))
    cand, prio = cand[o], prio[o]
    out = [cand[0]]
    best = [prio[0]]
    for s, p in zip(cand[1:], prio[1:]):
        if s - out[-1] <= tol:
            if p > best[-1]:
                out[-1], best[-1] = s, p
        else:
            out.append(s)
            best.append(p)
    return np.asarray(out)


def edge_map(grid: GridComplex, crosses: Sequence[BoundaryCross], ytilde: PAMap, y: PAMap,
             n: int = 16, arm_samples: int = ARM_SAMPLES) -> EdgeMap:
    """Sample u_delta on every grid edge.

    Each edge carries the n + 1 uniform nodes (shared with the square
    extensions), the cross kinks, the kinks of f along the edge and at least
    ``arm_samples`` nodes per arm and per off-cross piece.
    """
    V = grid.vertices
    at = {c.vertex: idx for idx, c in enumerate(crosses)}
    # vertex values: y(w) at Gamma vertices, else f at the vertex
    labels = np.asarray(grid.labels)
    vinner = np.zeros(len(V), bool)
    vouter = np.zeros(len(V), bool)
    np.logical_or.at(vinner, grid.edges.ravel(), np.repeat(labels == INNER, 2))
    np.logical_or.at(vouter, grid.edges.ravel(), np.repeat(labels != INNER, 2))
    vval = np.empty((len(V), 2))
    plain = np.array([v not in at for v in range(len(V))])
    mixed = plain & vinner & vouter
    if mixed.any():
        v = int(np.argmax(mixed))
        raise NumericalError(f"grid vertex {v} joins INNER and OUTER edges outside a cross; "
                             "u_delta would be discontinuous")
    ti = plain & vinner
    if ti.any():
        vval[ti] = eval_points(ytilde, V[ti])
    to = plain & ~vinner
    if to.any():
        vval[to] = eval_points(y, V[to])
    for c in crosses:
        vval[c.vertex] = c.y_w
    uni = np.arange(n + 1) / n
    S, Ys, segs = [], [], []
    for e, (a, b) in enumerate(grid.edges):
        a, b = int(a), int(b)
        f = ytilde if labels[e] == INNER else y
        xa = xb = 0.0
        if a in at:
            ca = crosses[at[a]]
            ia = ca.arm_of(b)
            xa = float(ca.xi[ia])
        if b in at:
            cb = crosses[at[b]]
            ib = cb.arm_of(a)
            xb = float(cb.xi[ib])
        lo, hi = xa, 1.0 - xb
        T, F = restrict_to_segment(f, V[a], V[b])
        kinks = T[(T > lo) & (T < hi)]
        cand = [uni, kinks, np.linspace(lo, hi, arm_samples + 1)]
        prio = [np.full(n + 1, 3), np.full(len(kinks), 1), np.zeros(arm_samples + 1)]
        if xa > 0:
            cand += [np.array([xa]), np.linspace(0, xa, arm_samples + 1)]
            prio += [np.array([2]), np.zeros(arm_samples + 1)]
        if xb > 0:
            cand += [np.array([hi]), np.linspace(hi, 1, arm_samples + 1)]
            prio += [np.array([2]), np.zeros(arm_samples + 1)]
        s = _merge_samples(np.concatenate(cand), np.concatenate(prio), 1e-9)
        s[0], s[-1] = 0.0, 1.0
        # snap kinks that merged into a uniform node
        if xa > 0:
            xa = float(s[np.argmin(np.abs(s - xa))])
            lo = xa
        if xb > 0:
            hi = float(s[np.argmin(np.abs(s - hi))])
            xb = 1.0 - hi
        Y = np.column_stack([np.interp(s, T, F[:, 0]), np.interp(s, T, F[:, 1])])
        if xa > 0:
            m = s <= lo
            Y[m] = ca.y_w + (s[m] / xa)[:, None] * (ca.f_p[ia] - ca.y_w)
            Y[s == lo] = ca.f_p[ia]
            jump = np.abs(np.array([np.interp(lo, T, F[:, 0]), np.interp(lo, T, F[:, 1])]) - ca.f_p[ia]).max()
            if jump > CONTINUITY_TOL * max(1.0, np.abs(ca.f_p[ia]).max()):
                raise NumericalError(f"edge {e}: arm end of cross at vertex {a} mismatches by {jump:.3e}")
        if xb > 0:
            m = s >= hi
            Y[m] = cb.y_w + ((1.0 - s[m]) / xb)[:, None] * (cb.f_p[ib] - cb.y_w)
            Y[s == hi] = cb.f_p[ib]
            jump = np.abs(np.array([np.interp(hi, T, F[:, 0]), np.interp(hi, T, F[:, 1])]) - cb.f_p[ib]).max()
            if jump > CONTINUITY_TOL * max(1.0, np.abs(cb.f_p[ib]).max()):
                raise NumericalError(f"edge {e}: arm end of cross at vertex {b} mismatches by {jump:.3e}")
        for end, v in ((0, a), (-1, b)):
            if v not in at:
                jump = np.abs(Y[end] - vval[v]).max()
                if jump > CONTINUITY_TOL * max(1.0, np.abs(vval[v]).max()):
                    raise NumericalError(f"edge {e}: value at vertex {v} mismatches by {jump:.3e}")
            Y[end] = vval[v]
        S.append(s)
        Ys.append(Y)
        if xa > 0:
            segs.append((e, 0.0, xa, at[a], ia))
        segs.append((e, lo, hi, -1, -1))
        if xb > 0:
            segs.append((e, hi, 1.0, at[b], ib))
    return EdgeMap(grid, tuple(crosses), tuple(S), tuple(Ys), np.asarray(segs, float))


def _sample_on(em: EdgeMap, seg_ids: np.ndarray, rng) -> Tuple[np.ndarray, np.ndarray]:
    sg = em.segments[seg_ids]
    s = sg[:, 1] + rng.random(len(seg_ids)) * (sg[:, 2] - sg[:, 1])
    return sg[:, 0].astype(np.int64), s


def grid_bilip_report(em: EdgeMap, L: float, n_pairs: int = 100_000, seed: int = 0) -> dict:
    """Sampled distortion of u_delta on Q, overall and per configuration class."""
    _check_L(L)
    rng = np.random.default_rng(seed)
    sg = em.segments
    length = (sg[:, 2] - sg[:, 1])
    arm = np.nonzero(sg[:, 3] >= 0)[0]
    off = np.nonzero((sg[:, 3] < 0) & (length > 0))[0]
    p_all = length / length.sum()
    m = max(n_pairs // 8, 1)
    E1, S1, E2, S2 = [], [], [], []

    def add(e1, s1, e2, s2):
        E1.append(e1), S1.append(s1), E2.append(e2), S2.append(s2)

    # global random pairs
    a = rng.choice(len(sg), n_pairs, p=p_all)
    b = rng.choice(len(sg), n_pairs, p=p_all)
    add(*_sample_on(em, a, rng), *_sample_on(em, b, rng))
    # pairs within one segment, often very close
    a = rng.choice(len(sg), m, p=p_all)
    e1, s1 = _sample_on(em, a, rng)
    span = sg[a, 2] - sg[a, 1]
    s2 = np.clip(s1 + span * rng.normal(scale=0.05, size=m), sg[a, 1], sg[a, 2])
    add(e1, s1, e1, s2)
    if len(arm):
        cr = sg[arm, 3].astype(np.int64)
        by_cross: Dict[int, np.ndarray] = {}
        for c in np.unique(cr):
            by_cross[int(c)] = arm[cr == c]
        # different arms of one cross
        pick = rng.choice(arm, m)
        other = np.array([rng.choice(by_cross[int(sg[p, 3])]) for p in pick])
        add(*_sample_on(em, pick, rng), *_sample_on(em, other, rng))
        # arm point against the off-cross piece of the same edge (junction at p)
        same_edge_off = {int(sg[k, 0]): k for k in off}
        pick = np.array([p for p in rng.choice(arm, m) if int(sg[p, 0]) in same_edge_off])
        if len(pick):
            e1, s1 = _sample_on(em, pick, rng)
            o = np.array([same_edge_off[int(sg[p, 0])] for p in pick])
            e2, s2 = _sample_on(em, o, rng)
            add(e1, s1, e2, s2)
        # arms of crosses at neighbouring Gamma vertices (facing arms on shared edges)
        edge_arms: Dict[int, List[int]] = {}
        for k in arm:
            edge_arms.setdefault(int(sg[k, 0]), []).append(int(k))
        facing = [v for v in edge_arms.values() if len(v) == 2]
        if facing:
            idx = rng.integers(len(facing), size=m)
            f1 = np.array([facing[i][0] for i in idx])
            f2 = np.array([facing[i][1] for i in idx])
            add(*_sample_on(em, f1, rng), *_sample_on(em, f2, rng))
        # random arms of distinct crosses, plus arms against off-cross points anywhere
        add(*_sample_on(em, rng.choice(arm, m), rng), *_sample_on(em, rng.choice(arm, m), rng))
        if len(off):
            add(*_sample_on(em, rng.choice(arm, m), rng), *_sample_on(em, rng.choice(off, m), rng))
    if len(off):
        add(*_sample_on(em, rng.choice(off, m), rng), *_sample_on(em, rng.choice(off, m), rng))
    E1, S1, E2, S2 = (np.concatenate(x) for x in (E1, S1, E2, S2))
    Z1, Z2 = em.positions(E1, S1), em.positions(E2, S2)
    U1, U2 = em.eval(E1, S1), em.eval(E2, S2)
    dz = np.linalg.norm(Z1 - Z2, axis=1)
    du = np.linalg.norm(U1 - U2, axis=1)
    keep = dz > 1e-12 * em.grid.r
    dz, du = dz[keep], du[keep]
    with np.errstate(divide="ignore"):
        ratio = np.where(du > 0, np.maximum(du / dz, dz / np.where(du > 0, du, 1.0)), np.inf)
    # classify each point by the cross and arm it lies on (-1 when off-cross)
    c1, a1 = _cross_of(em, E1[keep], S1[keep])
    c2, a2 = _cross_of(em, E2[keep], S2[keep])
    cls = np.full(len(ratio), "step4", dtype=object)
    cls[(c1 < 0) & (c2 < 0)] = "step2"
    cls[(c1 < 0) ^ (c2 < 0)] = "step3"
    same = (c1 >= 0) & (c1 == c2)
    cls[same & (a1 == a2)] = "step1_same_arm"
    cls[same & (a1 != a2)] = "step1_cross"
    steps = {}
    for name, bound in STEP_BOUNDS.items():
        r_ = ratio[cls == name]
        mx = float(r_.max()) if len(r_) else None
        steps[name] = {"pairs": int(len(r_)), "measured": mx, "bound": bound * L,
                       "ok": bool(mx is None or mx <= bound * L * (1 + 1e-9))}
    measured = float(ratio.max(initial=1.0))
    return {"pairs": int(len(ratio)), "measured": measured, "bound": 18.0 * L,
            "ok": bool(measured <= 18.0 * L * (1 + 1e-9)), "steps": steps}


def _cross_of(em: EdgeMap, E: np.ndarray, S: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sg = em.segments
    arms = sg[sg[:, 3] >= 0]
    c = np.full(len(E), -1, np.int64)
    a = np.full(len(E), -1, np.int64)
    if not len(arms):
        return c, a
    order = np.argsort(arms[:, 0], kind="stable")
    arms = arms[order]
    ae = arms[:, 0].astype(np.int64)
    lo = np.searchsorted(ae, E, "left")
    hi = np.searchsorted(ae, E, "right")
    for k in range(2):  # at most two arms per edge
        idx = lo + k
        has = idx < hi
        j = np.where(has, idx, 0)
        inside = has & (S >= arms[j, 1] - 1e-15) & (S <= arms[j, 2] + 1e-15)
        c[inside] = arms[j[inside], 3].astype(np.int64)
        a[inside] = arms[j[inside], 4].astype(np.int64)
    return c, a


def verify_grid_bilip(em: EdgeMap, L: float, n_pairs: int = 100_000, seed: int = 0) -> Tuple[bool, float]:
    rep = grid_bilip_report(em, L, n_pairs, seed)
    return rep["ok"], rep["measured"]


def _region_cells(m: PAMap, grid: GridComplex, region: str) -> np.ndarray:
    """Cells of m inside the region; raises if a used cell straddles regions."""
    r, o = grid.r, grid.origin
    ij = np.floor((m.mesh.centroids - o) / r).astype(np.int64)
    ny, nx = grid.layers.shape
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < nx) & (ij[:, 1] >= 0) & (ij[:, 1] < ny)
    part = np.full(len(ij), "", dtype=object)
    part[ok] = grid.partition[ij[ok, 1], ij[ok, 0]]
    sel = np.nonzero(part == region)[0]
    poly = grid.region_polygon(region).buffer(1e-9 * r, join_style="mitre")
    shapely.prepare(poly)
    X = m.mesh.vertices[m.mesh.cells[sel]]
    inside = shapely.covers(poly, shapely.points(X.reshape(-1, 2))).reshape(-1, 3).all(axis=1)
    if not inside.all():
        bad = int(sel[np.argmin(inside)])
        raise InputError(f"cell {bad} of the input map straddles the {region} region; "
                         "input meshes must be compatible with the tiling lattice")
    return sel


def conform_to_grid(m: PAMap, grid: GridComplex) -> PAMap:
    """The same map on a refined mesh whose cells each lie in one lattice square.

    Cells crossing lattice lines are cut into convex pieces and fanned from
    the piece centroid; the affine part of the cell carries over, so the map
    is unchanged. Original vertices keep their images bit for bit.
    """
    r, o = grid.r, grid.origin
    C = m.mesh.cells
    X = m.mesh.vertices[C]
    lo = np.floor((X.min(axis=1) - o) / r + 1e-9).astype(np.int64)
    hi = np.ceil((X.max(axis=1) - o) / r - 1e-9).astype(np.int64)
    cut = np.nonzero(np.any(hi - lo > 1, axis=1))[0]
    if not len(cut):
        return m
    G = m.gradients
    keep = np.setdiff1d(np.arange(len(C)), cut)
    pieces = [(m.mesh.vertices, m.images, C[keep])]
    tris = shapely.polygons(np.concatenate([X[cut], X[cut][:, :1]], axis=1))
    for c, tri in zip(cut, tris):
        for i in range(lo[c, 0], hi[c, 0]):
            for j in range(lo[c, 1], hi[c, 1]):
                x0, y0 = o + r * np.array([i, j])
                pg = shapely.intersection(tri, shapely.box(x0, y0, x0 + r, y0 + r))
                if not isinstance(pg, shapely.Polygon) or pg.area <= 1e-14 * m.mesh.areas[c]:
                    continue
                pg = shapely.orient_polygons(shapely.remove_repeated_points(pg, 1e-12 * r))
                P = np.asarray(pg.exterior.coords)[:-1]
                if len(P) > 3:
                    ctr = P.mean(axis=0)
                    P = np.vstack([P, ctr])
                    F = np.array([[len(P) - 1, k, (k + 1) % (len(P) - 1)] for k in range(len(P) - 1)])
                else:
                    F = np.array([[0, 1, 2]])
                Y = m.images[C[c, 0]] + (P - m.mesh.vertices[C[c, 0]]) @ G[c].T
                pieces.append((P, Y, F))
    return assemble(pieces, 1e-10 * r)


def _piece(m: PAMap, cells: np.ndarray):
    used, inv = np.unique(m.mesh.cells[cells], return_inverse=True)
    return m.mesh.vertices[used], m.images[used], inv.reshape(-1, 3)


def extend_and_glue(em: EdgeMap, grid: GridComplex, ytilde: PAMap, y: PAMap, n: int = 16,
                    jobs: int = 1, budget: int = extension.DEFAULT_BUDGET,
                    return_info: bool = False):
    """u = y on BOUND, square extensions of em on the strip, ytilde on BULK."""
    maps, Ls = extension.extend_all_squares(em, grid, n, jobs, budget)
    ytilde, y = conform_to_grid(ytilde, grid), conform_to_grid(y, grid)
    pieces = [_piece(y, _region_cells(y, grid, BOUND)), _piece(ytilde, _region_cells(ytilde, grid, BULK))]
    pieces += [(m.mesh.vertices, m.images, m.mesh.cells) for m in maps]
    tol = 1e-10 * grid.r
    u = assemble(pieces, tol)
    rep = injectivity_report(u)
    if not rep["injective"]:
        raise NumericalError(f"glued map failed certification: {rep}")
    # the trace on the domain boundary is copied from y
    ybd = y.mesh.boundary_vertices
    tree = cKDTree(u.mesh.vertices)
    d, idx = tree.query(y.mesh.vertices[ybd])
    trace_exact = bool(np.all(d <= tol) and np.array_equal(u.images[idx], y.images[ybd]))
    if not trace_exact:
        raise NumericalError("glued map does not reproduce the boundary trace of y")
    if not return_info:
        return u
    info = {"extension_L": [float(v) for v in Ls], "extension_L_max": float(max(Ls)) if Ls else 1.0,
            "certification": rep,
            "trace_exact": trace_exact}
    return u, info


def modified_area(u: PAMap, ytilde: PAMap, tol: float = 1e-9) -> float:
    """Area of {grad u != grad ytilde}, measured cell-wise at u's centroids."""
    G = gradient_at(ytilde, u.mesh.centroids)
    diff = np.abs(u.gradients - G).max(axis=(1, 2))
    scale = np.maximum(1.0, np.abs(G).max(axis=(1, 2)))
    return float(u.mesh.areas[diff > tol * scale].sum())


def tiling_for_budget(dom: Domain2, delta: float, max_halvings: int = 24) -> GridComplex:
    """Tiling whose strip plus collar has area at most delta |Omega|.

    The strip width passed to the tiler is halved until the region where the
    cut-off may change gradients fits the budget.
    """
    if not 0 < delta < 1:
        raise InputError(f"area budget delta must lie in (0, 1), got {delta}")
    ds = delta
    last = None
    for _ in range(max_halvings + 1):
        try:
            g = build_tiling(dom, ds)
        except InputError as exc:
            last = exc
            ds /= 2
            continue
        a = g.partition_areas()
        if a[STRIP] + a[BOUND] <= delta * dom.area:
            return g
        ds /= 2
    raise InputError(f"no tiling fits the area budget delta={delta}" + (f": {last}" if last else ""))


@dataclass(eq=False)
class CutoffResult:
    u: PAMap
    grid: GridComplex
    crosses: List[BoundaryCross]
    edge_map: EdgeMap
    grid_report: dict
    info: dict
    modified_area: float
    modified_fraction: float
    sup_distance: float
    L: float
    delta: Optional[float] = None
    index: Optional[int] = None

    def report(self) -> dict:
        xi = np.array([c.xi for c in self.crosses]) if self.crosses else np.zeros((0, 4))
        return {
            "r": self.grid.r,
            "delta": self.delta,
            "sequence_index": self.index,
            "n_crosses": len(self.crosses),
            "xi": [c.to_json() for c in self.crosses],
            "xi_min": float(xi.min()) if xi.size else None,
            "xi_max": float(xi.max()) if xi.size else None,
            "grid_bilip": self.grid_report,
            "extension_L_max": self.info["extension_L_max"],
            "extension_bound_per_L4": extension.EXTENSION_CONSTANT,
            "measured_constant": max(self.grid_report["measured"], self.info["extension_L_max"]),
            "modified_area": self.modified_area,
            "modified_fraction": self.modified_fraction,
            "sup_distance": self.sup_distance,
            "closeness_level": closeness_level(self.grid.r, self.L),
            "L": self.L,
            "extension_theoretical_bound": extension.theoretical_bound(self.L),
            "trace_exact": self.info["trace_exact"],
            "injective": self.info["certification"]["injective"],
            "orientation_preserving": self.info["certification"]["orientation_preserving"],
            "n_cells": int(self.u.mesh.n_cells),
        }


def cutoff(ytilde: PAMap, y: PAMap, grid: GridComplex, L: float, n: int = 16, jobs: int = 1,
           budget: int = extension.DEFAULT_BUDGET, n_pairs: int = 100_000, seed: int = 0,
           require_closeness: bool = True) -> CutoffResult:
    """Full cut-off: crosses, edge map, grid check, extension and glue."""
    _check_L(L)
    sd = sup_distance(ytilde, y, grid)
    if require_closeness and sd > closeness_level(grid.r, L):
        raise PreconditionError(f"sup |ytilde - y| = {sd:.3e} exceeds r/(12 L^3) = "
                                f"{closeness_level(grid.r, L):.3e}")
    crosses = build_crosses(grid, ytilde, y, L)
    em = edge_map(grid, crosses, ytilde, y, n)
    grep = grid_bilip_report(em, L, n_pairs, seed)
    u, info = extend_and_glue(em, grid, ytilde, y, n, jobs, budget, return_info=True)
    ma = modified_area(u, ytilde)
    return CutoffResult(u, grid, crosses, em, grep, info, ma, ma / grid.domain.area, sd, float(L))


def domain_from_mesh(mesh: Mesh2) -> Domain2:
    """Rectilinear domain spanned by a mesh (collinear boundary nodes dropped)."""
    rings = []
    for loop in mesh.loops:
        P = mesh.vertices[loop]
        prev, nxt = np.roll(P, 1, axis=0), np.roll(P, -1, axis=0)
        cross = (P[:, 0] - prev[:, 0]) * (nxt[:, 1] - P[:, 1]) - (P[:, 1] - prev[:, 1]) * (nxt[:, 0] - P[:, 0])
        rings.append(P[np.abs(cross) > 1e-12])
    areas = [0.5 * float(np.dot(R[:, 0], np.roll(R[:, 1], -1)) - np.dot(np.roll(R[:, 0], -1), R[:, 1]))
             for R in rings]
    k = int(np.argmax(areas))
    return Domain2(rings[k], tuple(R for i, R in enumerate(rings) if i != k))


def cutoff_sequence(seq: Sequence[PAMap], y: PAMap, deltas: Sequence[float], L: float,
                    domain: Optional[Domain2] = None, n: int = 16, jobs: int = 1,
                    n_pairs: int = 20_000) -> List[CutoffResult]:
    """Cut off a sequence converging to y for each area budget delta_n.

    For every delta_n the first member (at or after the previous pick) that
    is close enough on the delta_n tiling is used. Budgets for which no
    member is close enough are skipped with a warning.
    """
    _check_L(L)
    dom = domain_from_mesh(y.mesh) if domain is None else domain
    out = []
    k0 = 0
    for dn in deltas:
        grid = tiling_for_budget(dom, dn)
        lvl = closeness_level(grid.r, L)
        pick = None
        for k in range(k0, len(seq)):
            if sup_distance(seq[k], y, grid) <= lvl:
                pick = k
                break
        if pick is None:
            warnings.warn(f"no sequence member is within r/(12L^3) of y for delta={dn}; skipped")
            continue
        res = cutoff(seq[pick], y, grid, L, n, jobs, n_pairs=n_pairs)
        res.delta, res.index = float(dn), pick
        out.append(res)
        k0 = pick
    return out
