"""Empirical gradient Young measures of piecewise-affine maps.

A measure is a partition of the domain into polygonal regions together
with a finite list of atoms (matrix, weight) per region. Gradients of
piecewise-affine maps are piecewise constant, so the histograms are exact
and every pairing is a finite sum.

The constructions that produce generating sequences (rescaled copies,
dyadic Vitali families, convex combinations, planted laminates) all keep
the affine trace of each copy, so copies glue without a cut-off.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from shapely.geometry import MultiPolygon, Polygon, box

from . import laminates, matgeom
from .errors import InputError, NumericalError, PreconditionError, SupportViolation
from .meshes import assemble
from .pamap import Mesh2, PAMap, certify_injective, eval_points

ATOM_TOL = 1e-8
WEIGHT_TOL = 1e-9
AREA_RTOL = 1e-9

Region = Union[Polygon, MultiPolygon]


def _linkage_labels(X: np.ndarray, tol: float) -> np.ndarray:
    """Single-linkage components at Chebyshev distance tol.

    Rows are binned into cubes of side tol; rows sharing a cube are linked,
    and only rows in neighbouring cubes need a distance test. This stays
    linear when thousands of rows coincide up to rounding.
    """
    key = np.floor(X / tol).astype(np.int64)
    cells, cid = np.unique(key, axis=0, return_inverse=True)
    cid = cid.ravel()
    nc = len(cells)
    members = np.split(np.argsort(cid, kind="stable"), np.cumsum(np.bincount(cid, minlength=nc))[:-1])
    view = np.ascontiguousarray(cells).view([("", np.int64)] * 4).ravel()
    offs = np.array(np.meshgrid(*[[-1, 0, 1]] * 4, indexing="ij")).reshape(4, -1).T
    offs = offs[[tuple(o) > (0, 0, 0, 0) for o in offs]]
    ea, eb = [], []
    for o in offs:
        q = np.ascontiguousarray(cells + o).view([("", np.int64)] * 4).ravel()
        pos = np.searchsorted(view, q)
        hit = pos < nc
        hit[hit] = view[pos[hit]] == q[hit]
        for a, b in zip(np.nonzero(hit)[0], pos[hit]):
            Pa, Pb = X[members[a]], X[members[b]]
            if len(Pa) * len(Pb) <= 64:
                near = np.abs(Pa[:, None] - Pb[None]).max(axis=2).min() <= tol
            else:
                near = np.isfinite(cKDTree(Pb).query(Pa, p=np.inf, distance_upper_bound=tol * (1 + 1e-12))[0]).any()
            if near:
                ea.append(a)
                eb.append(b)
    g = coo_matrix((np.ones(len(ea)), (np.asarray(ea, np.int64), np.asarray(eb, np.int64))), shape=(nc, nc))
    _, lab = connected_components(g, directed=False)
    return lab[cid]


def merge_atoms(M: np.ndarray, w: np.ndarray, tol: float = ATOM_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Merge atoms closer than tol in the max-entry metric (tol = 0: identical
    matrices only). Merged atoms sit at the weighted mean. Output is sorted."""
    M = np.asarray(M, float).reshape(-1, 2, 2)
    w = np.asarray(w, float)
    if len(M) == 0:
        return M, w
    X, inv = np.unique(M.reshape(-1, 4), axis=0, return_inverse=True)
    w = np.bincount(inv.ravel(), w, len(X))
    lab = _linkage_labels(X, tol) if tol > 0 else np.arange(len(X))
    n = lab.max() + 1
    W = np.bincount(lab, w, n)
    cnt = np.bincount(lab, minlength=n)
    S = np.stack([np.bincount(lab, w * X[:, q], n) for q in range(4)], axis=1)
    first = np.full(n, len(X))
    np.minimum.at(first, lab, np.arange(len(X)))
    # matrices that were not merged with a different one keep their exact entries
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = S / W[:, None]
    R = np.where((cnt > 1)[:, None] & (W[:, None] != 0), mean, X[first])
    order = np.lexsort(R.T[::-1])
    return R[order].reshape(-1, 2, 2), W[order]


@dataclass(frozen=True, eq=False)
class EmpiricalYoungMeasure:
    regions: Tuple[Region, ...]
    atoms: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    rho: Optional[float] = None
    supported: bool = False

    def __post_init__(self):
        regions = tuple(self.regions)
        atoms = tuple((np.asarray(M, float).reshape(-1, 2, 2), np.asarray(w, float)) for M, w in self.atoms)
        if len(regions) != len(atoms) or not regions:
            raise InputError("one atom list per region is required")
        for k, (M, w) in enumerate(atoms):
            if len(M) != len(w) or len(w) == 0:
                raise InputError(f"region {k}: atoms and weights differ in length or are empty")
            if np.any(w < 0) or abs(w.sum() - 1.0) > WEIGHT_TOL:
                raise InputError(f"region {k}: weights must be >= 0 and sum to 1 (sum {w.sum()!r})")
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "atoms", atoms)
        if self.rho is not None:
            matgeom.check_rho(self.rho)
        if self.supported:
            check_support(self)

    @property
    def areas(self) -> np.ndarray:
        return np.array([r.area for r in self.regions])

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def to_json(self) -> dict:
        return {
            "schema": "ym.v1",
            "rho": self.rho,
            "supported": self.supported,
            "regions": [{"polygons": region_to_json(r), "area": float(r.area),
                         "atoms": [{"A": M.ravel().tolist(), "w": float(x)} for M, x in zip(*a)]}
                        for r, a in zip(self.regions, self.atoms)],
        }

    @classmethod
    def from_json(cls, d: dict) -> "EmpiricalYoungMeasure":
        if d.get("schema") != "ym.v1":
            raise InputError(f"expected schema ym.v1, got {d.get('schema')!r}")
        try:
            regs = [region_from_json(r["polygons"]) for r in d["regions"]]
            atoms = [(np.array([a["A"] for a in r["atoms"]], float), np.array([a["w"] for a in r["atoms"]], float))
                     for r in d["regions"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"ym.v1: malformed region entry ({exc})") from exc
        return cls(tuple(regs), tuple(atoms), d.get("rho"), bool(d.get("supported", False)))


def region_to_json(r: Region) -> list:
    polys = list(r.geoms) if isinstance(r, MultiPolygon) else [r]
    return [{"exterior": np.asarray(p.exterior.coords)[:-1].tolist(),
             "holes": [np.asarray(h.coords)[:-1].tolist() for h in p.interiors]} for p in polys]


def region_from_json(d) -> Region:
    try:
        polys = [Polygon(p["exterior"], p.get("holes", [])) for p in d]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed polygon ({exc})") from exc
    if not polys or any(not p.is_valid or p.area <= 0 for p in polys):
        raise InputError("region polygons must be valid with positive area")
    return polys[0] if len(polys) == 1 else MultiPolygon(polys)


def regions_to_json(regions: Sequence[Region], names: Optional[Sequence[str]] = None) -> dict:
    names = list(names) if names is not None else [f"R{k}" for k in range(len(regions))]
    return {"schema": "regions.v1",
            "regions": [{"name": n, "polygons": region_to_json(r)} for n, r in zip(names, regions)]}


def regions_from_json(d: dict) -> List[Region]:
    if d.get("schema") != "regions.v1":
        raise InputError(f"expected schema regions.v1, got {d.get('schema')!r}")
    try:
        return [region_from_json(r["polygons"]) for r in d["regions"]]
    except KeyError as exc:
        raise InputError(f"regions.v1: missing key {exc}") from exc


def check_support(m: EmpiricalYoungMeasure) -> None:
    """Every atom must have det > 0 and, with rho set, lie in R_rho+."""
    for k, (M, w) in enumerate(m.atoms):
        live = w > 0
        ok = matgeom.det2(M) > 0
        if m.rho is not None:
            ok &= matgeom.class_membership_batch(M, m.rho, True)
        if np.any(live & ~ok):
            bad = M[np.argmax(live & ~ok)]
            raise SupportViolation(f"region {k}: atom {bad.ravel().tolist()} is outside the support class")


def _as_region_list(regions) -> List[Region]:
    if isinstance(regions, (Polygon, MultiPolygon)):
        return [regions]
    return list(regions)


def region_cells(mesh: Mesh2, regions: Sequence[Region]) -> List[np.ndarray]:
    """Cells of the mesh per region; the mesh must be compatible with the
    partition (every cell inside exactly one region)."""
    cen = mesh.centroids
    areas = mesh.areas
    out = []
    taken = np.zeros(mesh.n_cells, bool)
    for k, r in enumerate(regions):
        shapely.prepare(r)
        inside = shapely.contains_xy(r, cen[:, 0], cen[:, 1]) & ~taken
        taken |= inside
        idx = np.nonzero(inside)[0]
        if not len(idx):
            raise InputError(f"region {k} contains no cell of the mesh")
        if abs(areas[idx].sum() - r.area) > AREA_RTOL * max(r.area, mesh.area):
            raise InputError(f"mesh is not compatible with region {k}: cell area {areas[idx].sum()!r} "
                             f"vs region area {r.area!r}")
        out.append(idx)
    if not taken.all():
        raise InputError(f"{int((~taken).sum())} cells lie outside every region")
    return out


def empirical_measure(seq: Sequence[PAMap], regions, tail: int = 1, rho: Optional[float] = None,
                      supported: bool = False, tol: float = ATOM_TOL) -> EmpiricalYoungMeasure:
    """Area-weighted gradient histograms of the last ``tail`` maps, averaged."""
    seq = list(seq)
    if not seq:
        raise InputError("empty sequence")
    if not 1 <= tail <= len(seq):
        raise InputError(f"tail must lie in [1, {len(seq)}]")
    regions = _as_region_list(regions)
    per_region: List[Tuple[List[np.ndarray], List[np.ndarray]]] = [([], []) for _ in regions]
    for m in seq[-tail:]:
        cells = region_cells(m.mesh, regions)
        G = m.gradients
        a = m.mesh.areas
        for k, idx in enumerate(cells):
            per_region[k][0].append(G[idx])
            per_region[k][1].append(a[idx] / a[idx].sum() / tail)
    atoms = []
    for Ms, ws in per_region:
        M, w = merge_atoms(np.concatenate(Ms), np.concatenate(ws), tol)
        atoms.append((M, w / w.sum()))
    return EmpiricalYoungMeasure(tuple(regions), tuple(atoms), rho, supported)


def first_moment(m: EmpiricalYoungMeasure) -> np.ndarray:
    return np.stack([np.einsum("k,kij->ij", w, M) for M, w in m.atoms])


def pair_with_test(m: EmpiricalYoungMeasure, v: Callable) -> np.ndarray:
    out = []
    for M, w in m.atoms:
        vals = np.asarray(v(M), float)
        live = w > 0
        out.append(float(np.sum(w[live] * vals[live])))
    return np.array(out)


def homogenize(m: EmpiricalYoungMeasure) -> EmpiricalYoungMeasure:
    """Single region carrying the area-weighted union of all atoms (exact
    duplicates merged only, so pairings are conserved up to rounding)."""
    if m.n_regions == 1:
        return m
    a = m.areas
    Ms = np.concatenate([M for M, _ in m.atoms])
    ws = np.concatenate([w * (a[k] / a.sum()) for k, (_, w) in enumerate(m.atoms)])
    M, w = merge_atoms(Ms, ws, 0.0)
    return EmpiricalYoungMeasure((shapely.union_all(list(m.regions)),), ((M, w),), m.rho, m.supported)


def mixture(measures: Sequence[EmpiricalYoungMeasure], weights: Sequence[float],
            tol: float = ATOM_TOL) -> EmpiricalYoungMeasure:
    """Region-wise convex combination of measures on the same partition."""
    weights = np.asarray(weights, float)
    if np.any(weights < 0) or abs(weights.sum() - 1) > WEIGHT_TOL:
        raise InputError("mixture weights must be >= 0 and sum to 1")
    R = measures[0].n_regions
    if any(mm.n_regions != R for mm in measures):
        raise InputError("measures live on different partitions")
    atoms = []
    for k in range(R):
        Ms = np.concatenate([mm.atoms[k][0] for mm in measures])
        ws = np.concatenate([lam * mm.atoms[k][1] for lam, mm in zip(weights, measures)])
        atoms.append(merge_atoms(Ms, ws, tol))
    return EmpiricalYoungMeasure(measures[0].regions, tuple(atoms), measures[0].rho, measures[0].supported)


def total_variation(m1: EmpiricalYoungMeasure, m2: EmpiricalYoungMeasure,
                    tol: float = ATOM_TOL) -> np.ndarray:
    """Per-region total-variation distance sup_E |nu1(E) - nu2(E)| with atoms
    matched within tol."""
    if m1.n_regions != m2.n_regions:
        raise InputError("measures live on different partitions")
    out = []
    for (M1, w1), (M2, w2) in zip(m1.atoms, m2.atoms):
        M = np.concatenate([M1, M2])
        _, s = merge_atoms(M, np.concatenate([w1, -w2]), tol)
        out.append(0.5 * float(np.abs(s).sum()))
    return np.array(out)


def region_average_gradient(u: PAMap, regions) -> np.ndarray:
    regions = _as_region_list(regions)
    out = []
    for idx in region_cells(u.mesh, regions):
        a = u.mesh.areas[idx]
        out.append(np.einsum("k,kij->ij", a, u.gradients[idx]) / a.sum())
    return np.stack(out)


# rescaled copies

def _triangulate(poly: Polygon, convex: bool) -> List[np.ndarray]:
    """Triangles (3, 2) covering a polygon."""
    poly = shapely.simplify(shapely.remove_repeated_points(poly, 1e-15), 0.0)
    if poly.is_empty or poly.area <= 0:
        return []
    if convex and isinstance(poly, Polygon) and not poly.interiors:
        P = np.asarray(poly.exterior.coords)[:-1]
        if len(P) == 3:
            return [P]
        # a centroid fan has no degenerate triangles even with near-collinear vertices
        c = P.mean(axis=0)
        return [np.stack([c, P[i], P[(i + 1) % len(P)]]) for i in range(len(P))]
    tris = shapely.constrained_delaunay_triangles(poly)
    return [np.asarray(t.exterior.coords)[:3] for t in tris.geoms if t.area > 0]


def _clip_map(m: PAMap, window: Polygon):
    """(vertices, images, cells) of m restricted to the window."""
    C = m.mesh.cells
    X = m.mesh.vertices[C]
    polys = shapely.polygons(np.concatenate([X, X[:, :1]], axis=1))
    tree = shapely.STRtree(polys)
    cand = np.sort(tree.query(window))
    pieces = shapely.intersection(polys[cand], window)
    convex = abs(window.convex_hull.area - window.area) <= 1e-12 * window.area
    Vs, Ys, Cs = [], [], []
    off = 0
    Rinv = m.mesh.ref_inverse
    G = m.gradients
    for c, geom in zip(cand, pieces):
        if geom.is_empty or geom.area <= 1e-14 * abs(m.mesh.areas[c]):
            continue
        polys_c = list(geom.geoms) if hasattr(geom, "geoms") else [geom]
        for pg in polys_c:
            if not isinstance(pg, Polygon):
                continue
            for T in _triangulate(pg, convex):
                # affine on the source cell
                Y = m.images[C[c, 0]] + (T - m.mesh.vertices[C[c, 0]]) @ G[c].T
                Vs.append(T)
                Ys.append(Y)
                Cs.append(np.arange(3) + off)
                off += 3
    if not Vs:
        raise InputError("window does not meet the mesh")
    return np.concatenate(Vs), np.concatenate(Ys), np.stack(Cs)


def localize(seq: Sequence[PAMap], a, j: float) -> List[PAMap]:
    """x -> j u(a + x / j) on the domain of each map."""
    a = np.asarray(a, float)
    if not j >= 1:
        raise InputError(f"localisation factor must be >= 1, got {j}")
    out = []
    for m in seq:
        dom = m.mesh.polygon()
        window = shapely.affinity.translate(shapely.affinity.scale(dom, 1.0 / j, 1.0 / j, origin=(0, 0)),
                                            a[0], a[1])
        diam = float(np.ptp(m.mesh.vertices, axis=0).max())
        if not dom.buffer(1e-12 * diam).covers(window):
            raise InputError("window a + Omega / j is not inside Omega")
        V, Y, C = _clip_map(m, window)
        u = assemble([(j * (V - a), j * Y, C)], 1e-10 * diam, 1e-9)
        out.append(u)
    return out


class CoverError(NumericalError):
    def __init__(self, msg: str, achieved: float, copies=None):
        super().__init__(msg)
        self.achieved = achieved
        self.copies = copies or []


def _shape_polygon(shape) -> Polygon:
    if hasattr(shape, "polygon"):
        p = shape.polygon
        return p() if callable(p) else p
    if isinstance(shape, (Polygon, MultiPolygon)):
        return shape
    raise InputError("shape must be a Domain2 or a shapely polygon")


def copy_polygon(shape: Polygon, a, eps: float) -> Polygon:
    return shapely.affinity.translate(shapely.affinity.scale(shape, eps, eps, origin=(0, 0)), a[0], a[1])


def vitali_cover(target, shape, fill: float, max_level: int = 12, max_copies: int = 200_000,
                 max_eps: Optional[float] = None, strict: bool = True) -> List[Tuple[np.ndarray, float]]:
    """Disjoint copies a + eps shape inside target covering >= fill of its area.

    Dyadic greedy packing: at level l the bounding box of the target is cut
    into cells of 2^-l times the scaled shape box; a copy is placed in every
    free cell whose copy lies in the target. Levels start at 1 (and at
    eps <= max_eps when given); the last level is completed before stopping.
    Copies have pairwise disjoint interiors.
    """
    if not 0 < fill < 1:
        raise InputError(f"fill must lie in (0, 1), got {fill}")
    target = _shape_polygon(target)
    S = _shape_polygon(shape)
    sx0, sy0, sx1, sy1 = S.bounds
    tx0, ty0, tx1, ty1 = target.bounds
    sw, sh = sx1 - sx0, sy1 - sy0
    s0 = min((tx1 - tx0) / sw, (ty1 - ty0) / sh)
    nx0 = max(1, int(np.ceil((tx1 - tx0) / (s0 * sw) - 1e-12)))
    ny0 = max(1, int(np.ceil((ty1 - ty0) / (s0 * sh) - 1e-12)))
    shapely.prepare(target)
    goal = fill * target.area
    copies: List[Tuple[np.ndarray, float]] = []
    covered = 0.0
    # active cells: intersect the target, not yet inside a placed copy's cell
    active = [(i, j) for j in range(ny0) for i in range(nx0)]
    level = 0
    while level < max_level:
        level += 1
        eps = s0 / 2 ** level
        nxt = []
        for i, j in active:
            for dj in (0, 1):
                for di in (0, 1):
                    nxt.append((2 * i + di, 2 * j + dj))
        active = nxt
        if max_eps is not None and eps > max_eps:
            continue
        if not active:
            break
        ij = np.array(active)
        x0 = tx0 + ij[:, 0] * eps * sw
        y0 = ty0 + ij[:, 1] * eps * sh
        cells = shapely.box(x0, y0, x0 + eps * sw, y0 + eps * sh)
        A = np.column_stack([x0 - eps * sx0, y0 - eps * sy0])
        cps = np.array([copy_polygon(S, A[k], eps) for k in range(len(A))], dtype=object)
        inside = shapely.covers(target.buffer(1e-12 * eps * max(sw, sh)), cps)
        meets = shapely.intersects(target, cells) & ~shapely.touches(target, cells)
        keep = []
        for k in range(len(ij)):
            if inside[k]:
                copies.append((A[k], eps))
                covered += eps * eps * S.area
            elif meets[k]:
                keep.append(active[k])
        active = keep
        if len(copies) > max_copies:
            break
        if covered >= goal:
            return copies
    frac = covered / target.area
    if strict:
        raise CoverError(f"fill {fill} unreachable: achieved {frac:.6f} with {len(copies)} copies", frac, copies)
    return copies


def _unit_square_map(m: PAMap, name: str) -> None:
    if m.mesh.bbox != (0.0, 0.0, 1.0, 1.0) or abs(m.mesh.area - 1.0) > 1e-12:
        raise InputError(f"{name} must be defined on the unit square")


def _affine_trace_ok(m: PAMap, A: np.ndarray, b=np.zeros(2), tol: float = 1e-12) -> bool:
    bv = m.mesh.boundary_vertices
    X = m.mesh.vertices[bv]
    scale = max(1.0, float(np.abs(m.images).max()))
    return bool(np.abs(m.images[bv] - (X @ A.T + b)).max() <= tol * scale)


def van_der_corput_order(depth: int) -> np.ndarray:
    """(4^depth, 2) dyadic cell indices in base-4 bit-reversed order."""
    n = 4 ** depth
    out = np.zeros((n, 2), np.int64)
    for t in range(n):
        i = j = 0
        q = t
        for lev in range(depth):
            d = q & 3
            q >>= 2
            i |= (d & 1) << (depth - 1 - lev)
            j |= (d >> 1) << (depth - 1 - lev)
        out[t] = (i, j)
    return out


def _copy_piece(g: PAMap, a, eps: float, base: np.ndarray):
    """Vertices and images of x -> base + eps g((x - a) / eps)."""
    return a + eps * g.mesh.vertices, base + eps * g.images, g.mesh.cells


def convex_combine(y1: PAMap, y2: PAMap, A, lam: float, depth: int, return_info: bool = False):
    """Affine-trace map whose gradient distribution mixes those of y1 and y2.

    The unit square is cut into 4^depth dyadic squares; the first
    round(lam 4^depth) in van der Corput order carry rescaled copies of y1,
    the others copies of y2. Each copy keeps the trace A x, so the copies
    glue exactly; the uncovered fraction is zero.
    """
    A = matgeom.as_mat2(A)
    if not 0 <= lam <= 1:
        raise InputError(f"lambda must lie in [0, 1], got {lam}")
    if depth < 0:
        raise InputError("depth must be >= 0")
    for m, name in ((y1, "y1"), (y2, "y2")):
        _unit_square_map(m, name)
        if not _affine_trace_ok(m, A):
            raise InputError(f"{name} does not have trace A x")
        if not certify_injective(m):
            raise InputError(f"{name} is not certified injective")
    N = 2 ** depth
    eps = 1.0 / N
    order = van_der_corput_order(depth)
    n1 = int(round(lam * N * N))
    pieces = []
    for t, (i, j) in enumerate(order):
        a = np.array([i, j], float) * eps
        g = y1 if t < n1 else y2
        pieces.append(_copy_piece(g, a, eps, A @ a))
    y = assemble(pieces, 1e-10 * eps, 1e-9)
    if not certify_injective(y):
        raise NumericalError("combined map failed certification (inputs should have prevented this)")
    if return_info:
        return y, {"lam_effective": n1 / (N * N), "uncovered": 0.0, "copies": N * N, "eps": eps}
    return y


def _region_affine(u: PAMap, idx: np.ndarray):
    G = u.gradients[idx]
    Gr = G[0]
    if np.abs(G - Gr).max() > 1e-9 * (1.0 + np.abs(Gr).max()):
        raise InputError("u must be affine on each region of the measure")
    c = u.mesh.cells[idx[0], 0]
    return Gr, u.images[c] - Gr @ u.mesh.vertices[c]


def default_generator(M: np.ndarray, w: np.ndarray, G: np.ndarray, periods: int = 4,
                      c: float = 0.5) -> Optional[PAMap]:
    """Homogeneous generator on the unit square with trace G x: None for the
    Dirac mass at G, a laminate for two rank-one connected atoms."""
    live = w > 0
    M, w = M[live], w[live]
    if len(M) == 1 and np.abs(M[0] - G).max() <= ATOM_TOL:
        return None
    if len(M) == 2:
        return laminates.laminate_from_wells(M[0], M[1], float(w[0]), periods, c)
    raise InputError("no default generator for this measure; pass one per region")


def synthesize_sequence(measure_field: EmpiricalYoungMeasure, u: PAMap, k: int,
                        generators: Optional[Dict[int, PAMap]] = None, periods: int = 4,
                        c: float = 0.5, fill: float = 0.999, return_info: bool = False):
    """k-th member of a generating sequence for a measure whose underlying
    map u is affine on each region.

    Each region is packed with dyadic copies a + eps [0,1]^2, eps <= 1/k, and
    the region's generator g (trace G x) is planted as
    x -> u(a) + eps g((x - a) / eps). The rest of the region keeps u.
    """
    if k < 1:
        raise InputError("k must be >= 1")
    generators = dict(generators or {})
    if measure_field.supported:
        check_support(measure_field)
    cells = region_cells(u.mesh, measure_field.regions)
    moments = first_moment(measure_field)
    pieces = []
    copy_sup = 0.0
    eps_max = 0.0
    n_copies = 0
    for r, (region, idx) in enumerate(zip(measure_field.regions, cells)):
        G, b = _region_affine(u, idx)
        if np.abs(moments[r] - G).max() > 1e-8 * (1.0 + np.abs(G).max()):
            raise PreconditionError(f"region {r}: first moment differs from grad u")
        M, w = measure_field.atoms[r]
        g = generators.get(r)
        if g is None:
            g = default_generator(M, w, G, periods, c)
        if g is None:
            pieces.append((u.mesh.vertices, u.images, u.mesh.cells[idx]))
            continue
        _unit_square_map(g, f"generator of region {r}")
        if not _affine_trace_ok(g, G):
            raise InputError(f"generator of region {r} does not have trace G x")
        copies = vitali_cover(region, box(0, 0, 1, 1), fill, max_eps=1.0 / k, strict=False)
        if not copies:
            raise InputError(f"region {r} admits no square copy of size <= 1/{k}")
        dev = float(np.abs(g.images - g.mesh.vertices @ G.T).max())
        for a, eps in copies:
            pieces.append(_copy_piece(g, a, eps, G @ a + b))
            copy_sup = max(copy_sup, eps * dev)
            eps_max = max(eps_max, eps)
        n_copies += len(copies)
        rest = region.difference(shapely.union_all([copy_polygon(box(0, 0, 1, 1), a, e) for a, e in copies]))
        rest_polys = list(rest.geoms) if hasattr(rest, "geoms") else [rest]
        for pg in rest_polys:
            if not isinstance(pg, Polygon) or pg.is_empty:
                continue
            for T in _triangulate(pg, False):
                pieces.append((T, T @ G.T + b, np.arange(3)[None]))
    diam = float(np.ptp(u.mesh.vertices, axis=0).max())
    uk = assemble(pieces, 1e-10 * diam / max(k, 1), 1e-9)
    if not certify_injective(uk):
        raise NumericalError("synthesised map failed certification")
    if not return_info:
        return uk
    # u_k - u is affine on every cell of u_k, so the nodal maximum is exact
    sup = float(np.linalg.norm(uk.images - eval_points(u, uk.mesh.vertices), axis=1).max())
    return uk, {"sup_distance": sup, "copy_sup": copy_sup, "eps_max": eps_max, "copies": n_copies}
