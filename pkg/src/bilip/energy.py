"""Regularised energy I_eps(u) = int v(grad u) + eps (max|grad u| + max|(grad u)^-1|)
over certified maps with fixed boundary values."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import matgeom
from .errors import InputError, NumericalError
from .pamap import PAMap, certify_injective
from .relax import (DEFAULT_BUDGET, RelaxProblem, cell_gradients, descend, integral_objective,
                    scatter_cell_grad, seed_maps)

TRACE_TOL = 1e-12
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class EnergySpec:
    v: Callable
    eps: float
    u0: PAMap

    def __post_init__(self):
        if not self.eps >= 0:
            raise InputError(f"eps must be >= 0, got {self.eps}")
        if not certify_injective(self.u0):
            raise InputError("boundary datum u0 is not certified injective")


def affine_part(m: PAMap) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """(A, b) if m is affine up to rounding, else None."""
    G = m.gradients
    A = G[0]
    if np.abs(G - A).max() > 1e-12 * (1.0 + np.abs(A).max()):
        return None
    return A, m.images[0] - A @ m.mesh.vertices[0]


def _same_mesh(a, b) -> bool:
    return a is b or (a.n_vertices == b.n_vertices and np.array_equal(a.cells, b.cells)
                      and np.array_equal(a.vertices, b.vertices))


def _check_trace(spec: EnergySpec, u: PAMap) -> None:
    """u must equal u0 at its boundary nodes. Other meshes of the same domain
    are accepted when u0 is affine."""
    bv = u.mesh.boundary_vertices
    scale = max(1.0, float(np.abs(spec.u0.images).max()))
    if _same_mesh(u.mesh, spec.u0.mesh):
        ref = spec.u0.images[bv]
    else:
        ab = affine_part(spec.u0)
        if ab is None:
            raise InputError("u and u0 live on different meshes and u0 is not affine")
        if abs(u.mesh.area - spec.u0.mesh.area) > 1e-12 * spec.u0.mesh.area:
            raise InputError("u and u0 are defined on different domains")
        ref = u.mesh.vertices[bv] @ ab[0].T + ab[1]
    if np.abs(u.images[bv] - ref).max() > TRACE_TOL * scale:
        raise InputError("trace of u does not match u0 at the boundary nodes")


def _sup_terms(G: np.ndarray):
    smax, smin = matgeom.singular_values(G)
    return smax, 1.0 / smin


def i_eps(spec: EnergySpec, u: PAMap) -> float:
    _check_trace(spec, u)
    if not certify_injective(u):
        raise InputError("u is not certified injective")
    G = u.gradients
    vals = np.asarray(spec.v(G), float)
    smax, sinv = _sup_terms(G)
    return float(u.mesh.areas @ vals) + spec.eps * float(smax.max() + sinv.max())


def _sup_subgradient(G: np.ndarray, which: str) -> Tuple[float, np.ndarray]:
    """Value and averaged subgradient (per cell) of max_c |G_c| or max_c |G_c^-1|."""
    U, s, Vt = np.linalg.svd(G)
    if which == "max":
        val = s[:, 0]
    else:
        val = 1.0 / s[:, 1]
    top = float(val.max())
    ties = np.nonzero(val >= top * (1 - TIE_RTOL))[0]
    dG = np.zeros_like(G)
    w = 1.0 / len(ties)
    for c in ties:
        if which == "max":
            dG[c] = w * np.outer(U[c, :, 0], Vt[c, 0])
        else:
            dG[c] = -w * np.outer(U[c, :, 1], Vt[c, 1]) / s[c, 1] ** 2
    return top, dG


def objective(spec: EnergySpec, mesh=None) -> Callable:
    mesh = spec.u0.mesh if mesh is None else mesh
    base = integral_objective(mesh, spec.v)

    def fun(Y):
        f, g = base(Y)
        if not np.isfinite(f) or spec.eps == 0:
            return f, g
        G = cell_gradients(mesh, Y)
        t1, d1 = _sup_subgradient(G, "max")
        t2, d2 = _sup_subgradient(G, "inv")
        f = f + spec.eps * (t1 + t2)
        if g is not None:
            g = g + spec.eps * scatter_cell_grad(mesh, d1 + d2)
        return f, g
    return fun


def _descend_from(spec: EnergySpec, start: PAMap, budget: int):
    Y, trace = descend(start.images, start.mesh.interior_vertices, objective(spec, start.mesh), budget)
    u = PAMap(start.mesh, Y)
    if not certify_injective(u):
        raise NumericalError("descent produced an uncertified map")
    value = i_eps(spec, u)
    if value > trace[0] + 1e-12 * max(1.0, abs(trace[0])):
        raise NumericalError("descent increased the energy")
    return u, value, trace


def laminate_starts(spec: EnergySpec, n: int = 16) -> List[PAMap]:
    """Laminate seeds with the affine trace of u0 on the unit square."""
    ab = affine_part(spec.u0)
    if ab is None or spec.u0.mesh.bbox != (0.0, 0.0, 1.0, 1.0) or np.any(ab[1] != 0):
        raise InputError("laminate seeds need an affine u0 = A x on the unit square")
    p = RelaxProblem(spec.v, ab[0], n, ("laminate",), 0)
    return [m for _, m in seed_maps(p)]


def minimize(spec: EnergySpec, budget: int = DEFAULT_BUDGET, start: Optional[PAMap] = None,
             seeds: Sequence[str] = ("u0",), n: int = 16):
    """(u_star, value, trace) for the best of the descents started from u0
    (seed "u0"), from ``start`` and from laminate seeds (seed "laminate").

    The trace lists the accepted values of the winning descent and is
    non-increasing; value = i_eps(u_star) <= i_eps of its start.
    """
    starts = []
    if "u0" in seeds:
        starts.append(spec.u0)
    if start is not None:
        _check_trace(spec, start)
        if not certify_injective(start):
            raise InputError("start map is not certified injective")
        starts.append(start)
    if "laminate" in seeds:
        starts.extend(laminate_starts(spec, n))
    if not starts:
        raise InputError("no start map selected")
    best = None
    for s in starts:
        res = _descend_from(spec, s, budget)
        if best is None or res[1] < best[1]:
            best = res
    return best
