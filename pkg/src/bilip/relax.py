"""Upper estimates of the piecewise-affine relaxation Z'v(A) on the unit square.

Z'v(A) is the infimum of the mean of v(grad phi) over orientation-preserving
piecewise-affine homeomorphisms phi with phi(x) = A x on the boundary. The
empty admissible set (det A <= 0) gives +inf. Every number computed here is
an upper estimate: the minimum over explored certified maps.

Exploration is a multi-start descent over interior node images. Seeds are
affine maps on uniform meshes of side 2^j <= n and, for each rank-one
connected pair of wells of v, laminates with 2^j <= 2n periods.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import laminates, matgeom
from .densities import EnergyDensity, rank_one_pairs
from .errors import InputError, NumericalError, SupportViolation, PreconditionError
from .meshes import grid_mesh
from .pamap import Mesh2, PAMap, certify_injective

SEED_KINDS = ("affine", "laminate")
LAMINATE_C = (0.25, 0.5, 1.0)
DEFAULT_BUDGET = 200
JENSEN_ATOL = 1e-6
JENSEN_RTOL = 1e-3
MOMENT_TOL = 1e-6


@dataclass(frozen=True)
class RelaxProblem:
    v: Callable
    A: np.ndarray
    n: int = 16
    seeds: Tuple[str, ...] = SEED_KINDS
    budget: int = DEFAULT_BUDGET
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "A", matgeom.as_mat2(self.A))
        seeds = (self.seeds,) if isinstance(self.seeds, str) else tuple(self.seeds)
        bad = [s for s in seeds if s not in SEED_KINDS]
        if bad or not seeds:
            raise InputError(f"unknown seed kinds {bad}; expected a subset of {SEED_KINDS}")
        object.__setattr__(self, "seeds", seeds)
        if self.n < 1 or self.budget < 0:
            raise InputError("resolution must be >= 1 and budget >= 0")


# descent over interior node images

def scatter_cell_grad(mesh: Mesh2, dG: np.ndarray) -> np.ndarray:
    """Node gradient of sum_c E_c(G_c) from the per-cell derivatives dE_c/dG_c."""
    dF = dG @ np.transpose(mesh.ref_inverse, (0, 2, 1))
    C = mesh.cells
    N = mesh.n_vertices
    out = np.zeros((N, 2))
    for d in range(2):
        e1, e2 = dF[:, d, 0], dF[:, d, 1]
        out[:, d] = (np.bincount(C[:, 1], e1, N) + np.bincount(C[:, 2], e2, N)
                     - np.bincount(C[:, 0], e1 + e2, N))
    return out


def cell_gradients(mesh: Mesh2, Y: np.ndarray) -> np.ndarray:
    X = Y[mesh.cells]
    F = np.stack([X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]], axis=2)
    return F @ mesh.ref_inverse


def integral_objective(mesh: Mesh2, v) -> Callable:
    """Y -> (sum_c |c| v(G_c), node gradient); +inf if a cell folds."""
    areas = mesh.areas
    has_grad = hasattr(v, "grad")

    def fun(Y):
        G = cell_gradients(mesh, Y)
        if np.any(matgeom.det2(G) <= 0):
            return np.inf, None
        vals = np.asarray(v(G), float)
        if not np.all(np.isfinite(vals)):
            return np.inf, None
        g = scatter_cell_grad(mesh, areas[:, None, None] * v.grad(G)) if has_grad else None
        return float(areas @ vals), g
    return fun


def descend(Y0: np.ndarray, free: np.ndarray, objective: Callable, budget: int,
            gtol: float = 1e-12, ftol: float = 1e-15):
    """Monotone descent with Barzilai-Borwein steps and Armijo backtracking.

    A step is accepted only if the objective is finite (all cells keep
    det > 0) and decreases. Returns (Y, trace of accepted values).
    """
    Y = np.array(Y0, float)
    f, g = objective(Y)
    trace = [f]
    if not np.isfinite(f) or g is None or budget <= 0 or len(free) == 0:
        return Y, trace
    gn2 = float(np.sum(g[free] ** 2))
    alpha = 1e-2 / max(np.sqrt(gn2), 1e-300)
    for _ in range(budget):
        d = -g[free]
        dd = float(np.sum(d * d))
        if np.sqrt(dd) <= gtol:
            break
        a = alpha
        while a > 1e-30:
            Yn = Y.copy()
            Yn[free] += a * d
            fn, gn = objective(Yn)
            if np.isfinite(fn) and fn <= f - 1e-4 * a * dd and fn < f:
                break
            a *= 0.5
        else:
            break
        s = (Yn[free] - Y[free]).ravel()
        yv = (gn[free] - g[free]).ravel()
        sy = float(s @ yv)
        alpha = float(s @ s) / sy if sy > 0 else 2.0 * a
        done = f - fn <= ftol * max(1.0, abs(f))
        Y, f, g = Yn, fn, gn
        trace.append(f)
        if done:
            break
    return Y, trace


# seeds

def _affine_sizes(n: int) -> List[int]:
    sizes = [1 << j for j in range(n.bit_length()) if (1 << j) <= n]
    if sizes[-1] != n:
        sizes.append(n)
    return sizes


def _periods(n: int) -> List[int]:
    return [1 << j for j in range((2 * n).bit_length()) if (1 << j) <= 2 * n]


def seed_maps(p: RelaxProblem) -> List[Tuple[dict, PAMap]]:
    """Labelled candidate maps with trace A x on the unit square."""
    A = p.A
    out = []
    if "affine" in p.seeds:
        for m in _affine_sizes(p.n):
            mesh = grid_mesh(0.0, 0.0, 1.0, 1.0, m)
            out.append(({"kind": "affine", "size": m}, PAMap(mesh, mesh.vertices @ A.T)))
    wells = getattr(p.v, "wells", None)
    if "laminate" in p.seeds and isinstance(p.v, EnergyDensity):
        for i, j in rank_one_pairs(p.v):
            split = laminates.rank_one_split(wells[i], wells[j])
            if split is None:
                continue
            b, nrm = split
            D = np.outer(b, nrm)
            lam0 = float(np.sum((A - wells[j]) * D) / np.sum(D * D))
            lams = sorted({0.5, float(np.clip(lam0, 0.05, 0.95))})
            for lam in lams:
                for k in _periods(p.n):
                    for c in LAMINATE_C:
                        try:
                            m = laminates.laminate_map(A, b, nrm, lam, k, c, resolution=4 * p.n)
                        except InputError:
                            continue
                        out.append(({"kind": "laminate", "wells": [i, j], "lam": lam,
                                     "k": k, "c": c}, m))
    return out


def average_energy(v, m: PAMap) -> float:
    """|Omega|^-1 times the cell-exact integral of v(grad m)."""
    vals = np.asarray(v(m.gradients), float)
    if np.any(m.dets <= 0) or not np.all(np.isfinite(vals)):
        return np.inf
    return float(m.mesh.areas @ vals) / m.mesh.area


def _run_seed(p: RelaxProblem, label: dict, m: PAMap):
    mesh = m.mesh
    fun = integral_objective(mesh, p.v)
    Y, trace = descend(m.images, mesh.interior_vertices, fun, p.budget)
    best = PAMap(mesh, Y)
    info = dict(label)
    info.update(initial=trace[0] / mesh.area, value=trace[-1] / mesh.area,
                steps=len(trace) - 1, n_cells=mesh.n_cells)
    if label["kind"] == "laminate" and laminates._axis_of(_normal_of(p, label)) is not None:
        b, nrm = laminates.rank_one_split(*p.v.wells[label["wells"]])
        info["oracle"] = laminates.laminate_energy_oracle(p.v, p.A, b, nrm, label["lam"],
                                                          label["k"], label["c"])
    return info, best


def _normal_of(p: RelaxProblem, label: dict) -> np.ndarray:
    i, j = label["wells"]
    return laminates.rank_one_split(p.v.wells[i], p.v.wells[j])[1]


def zv_estimate(p: RelaxProblem, return_info: bool = False):
    """(value, argmap) with value the best average energy found; (+inf, None)
    when det A <= 0."""
    if matgeom.det2(p.A) <= 0:
        res = (np.inf, None)
        return res + ({"seeds": [], "empty": True},) if return_info else res
    seeds = seed_maps(p)
    if p.jobs > 1:
        with ThreadPoolExecutor(p.jobs) as ex:
            runs = list(ex.map(lambda s: _run_seed(p, *s), seeds))
    else:
        runs = [_run_seed(p, *s) for s in seeds]
    value, argmap, best_i = np.inf, None, -1
    for i, (info, m) in enumerate(runs):
        # v may be +inf on every seed (A outside the class of v): value +inf
        if argmap is None or info["value"] < value:
            value, argmap, best_i = info["value"], m, i
    if argmap is None:
        raise NumericalError("the seed set is empty for this density")
    if not certify_injective(argmap):
        raise NumericalError("best map failed certification")
    if return_info:
        return value, argmap, {"seeds": [r[0] for r in runs], "best": best_i, "empty": False}
    return value, argmap


# checks

def _trace_ok(m: PAMap, A: np.ndarray, tol: float = 1e-12) -> bool:
    bv = m.mesh.boundary_vertices
    X = m.mesh.vertices[bv]
    scale = max(1.0, float(np.abs(X).max()) * matgeom.norm(A))
    return bool(np.abs(m.images[bv] - X @ A.T).max() <= tol * scale)


def biqc_violation_witness(v, A, candidate: PAMap) -> Tuple[bool, float]:
    """(violates, gap) with gap = |Omega| v(A) - int v(grad phi).

    Cells whose gradient equals A up to rounding contribute v(A) exactly,
    so the affine candidate has gap 0.
    """
    A = matgeom.as_mat2(A)
    if not _trace_ok(candidate, A):
        raise InputError("candidate does not have trace A x at the boundary nodes")
    if not certify_injective(candidate):
        raise InputError("candidate is not certified injective")
    G = candidate.gradients
    vA = float(np.asarray(v(A[None]), float)[0])
    same = np.abs(G - A).max(axis=(1, 2)) <= 1e-12 * (1.0 + np.abs(A).max())
    vals = np.asarray(v(G), float)
    areas = candidate.mesh.areas
    if not np.isfinite(vA):
        return False, float("nan")
    gap = float(areas[~same] @ (vA - vals[~same]))
    tol = 1e-9 * (1.0 + candidate.mesh.area * abs(vA))
    return bool(gap > tol), gap


def jensen_tolerance(rhs: float) -> float:
    return JENSEN_ATOL + JENSEN_RTOL * abs(rhs)


def jensen_check(m, u: PAMap, v, resolution: int = 16, seeds: Sequence[str] = SEED_KINDS,
                 budget: int = DEFAULT_BUDGET, cbar: Optional[float] = None, jobs: int = 1):
    """Per region (holds, lhs, rhs) with lhs the Z'v estimate at the region's
    first moment and rhs the pairing of the measure with v. The first moment
    must match the region average of grad u.

    A failure is reported, not raised: lhs is only an upper estimate.
    """
    from . import ym

    if m.supported:
        ym.check_support(m)
    else:
        for M, _ in m.atoms:
            if np.any(matgeom.det2(M) <= 0):
                raise SupportViolation("measure has atoms with det <= 0")
    if cbar is not None:
        rho = getattr(v, "rho", None)
        if rho is not None and rho < cbar:
            raise PreconditionError(f"density class {rho} is below the required {cbar}")
    moments = ym.first_moment(m)
    avg = ym.region_average_gradient(u, m.regions)
    gap = np.abs(avg - moments).max(axis=(1, 2))
    if np.any(gap > MOMENT_TOL * (1.0 + np.abs(moments).max(axis=(1, 2)))):
        raise PreconditionError(f"first moment differs from the region average of grad u by {gap.max():.3e}")
    rhs = ym.pair_with_test(m, v)
    out = []
    for k in range(len(moments)):
        lhs, _ = zv_estimate(RelaxProblem(v, moments[k], resolution, tuple(seeds), budget, jobs))
        out.append((bool(lhs <= rhs[k] + jensen_tolerance(rhs[k])), float(lhs), float(rhs[k])))
    return out


def plain_jensen_check(m, v):
    """Per region (holds, v(moment), pairing): the variant with v itself on
    the left. Reported only; it is not a consequence of the checks above
    unless v is bi-quasiconvex."""
    from . import ym

    moments = ym.first_moment(m)
    lhs = np.asarray(v(moments), float)
    rhs = ym.pair_with_test(m, v)
    return [(bool(a <= b + jensen_tolerance(b)), float(a), float(b)) for a, b in zip(lhs, rhs)]
