import numpy as np
import pytest

from bilip import densities, energy, laminates, matgeom, meshes, pamap
from bilip.errors import InputError

A1, A2 = np.diag([1.2, 1.0]), np.diag([0.8, 1.0])


def _affine(A, n=4):
    return pamap.affine_map(meshes.grid_mesh(0, 0, 1, 1, n), A)


def test_identity_example():
    u = _affine(np.eye(2))
    spec = energy.EnergySpec(densities.single_well(np.eye(2)), 0.1, u)
    assert energy.i_eps(spec, u) == pytest.approx(0.2, abs=1e-15)
    assert energy.i_eps(energy.EnergySpec(spec.v, 0.0, u), u) == 0.0


def test_matches_direct_cell_scan(rng):
    u0 = _affine(np.eye(2), 6)
    Y = u0.images.copy()
    iv = u0.mesh.interior_vertices
    Y[iv] += 0.03 * rng.normal(size=(len(iv), 2))
    u = pamap.PAMap(u0.mesh, Y)
    v = densities.double_well(A1, A2)
    spec = energy.EnergySpec(v, 0.05, u0)
    val = sum(a * float(v(G[None])[0]) for a, G in zip(u.mesh.areas, u.gradients))
    s = [np.linalg.svd(G, compute_uv=False) for G in u.gradients]
    direct = val + 0.05 * (max(x[0] for x in s) + max(1 / x[1] for x in s))
    assert energy.i_eps(spec, u) == pytest.approx(direct, rel=1e-12)
    assert energy.i_eps(spec, u) >= 0.05 * 2.0 - 1e-15


def test_trace_and_certification_errors():
    u0 = _affine(np.eye(2))
    spec = energy.EnergySpec(densities.single_well(np.eye(2)), 0.1, u0)
    with pytest.raises(InputError, match="trace"):
        energy.i_eps(spec, _affine(1.1 * np.eye(2)))
    with pytest.raises(InputError):
        energy.EnergySpec(spec.v, -1.0, u0)
    Y = u0.images.copy()
    Y[u0.mesh.interior_vertices[0]] = [3.0, 3.0]
    with pytest.raises(InputError):
        energy.i_eps(spec, pamap.PAMap(u0.mesh, Y))
    # another mesh of the square is fine for affine data
    assert energy.i_eps(spec, _affine(np.eye(2), 7)) == pytest.approx(0.2)


def test_single_well_minimum():
    A = np.array([[1.3, 0.2], [-0.1, 0.8]])
    u0 = _affine(A, 6)
    spec = energy.EnergySpec(densities.single_well(A), 0.05, u0)
    u, value, trace = energy.minimize(spec, 100)
    s = np.linalg.svd(A, compute_uv=False)
    assert value == pytest.approx(0.05 * (s[0] + 1 / s[1]), abs=1e-6)
    assert np.all(np.diff(trace) <= 0)


def test_perturbed_start_descends(rng):
    A = np.array([[1.1, 0.0], [0.1, 0.9]])
    u0 = _affine(A, 6)
    Y = u0.images.copy()
    iv = u0.mesh.interior_vertices
    Y[iv] += 0.02 * rng.normal(size=(len(iv), 2))
    start = pamap.PAMap(u0.mesh, Y)
    spec = energy.EnergySpec(densities.single_well(A), 0.01, u0)
    u, value, trace = energy.minimize(spec, 300, start=start, seeds=())
    assert np.all(np.diff(trace) <= 0)
    assert value < energy.i_eps(spec, start)
    assert pamap.certify_injective(u)
    bv = u.mesh.boundary_vertices
    assert np.array_equal(u.images[bv], u0.images[bv])


def test_double_well_laminate_seeded():
    A = 0.5 * (A1 + A2)
    u0 = _affine(A, 4)
    spec = energy.EnergySpec(densities.double_well(A1, A2), 0.01, u0)
    u, value, trace = energy.minimize(spec, 20, seeds=("u0", "laminate"), n=4)
    assert value < energy.i_eps(spec, u0)
    assert value == pytest.approx(energy.i_eps(spec, u))


def test_subgradient_ties_averaged():
    G = np.stack([np.diag([2.0, 1.0]), np.diag([2.0, 1.0]), np.eye(2)])
    top, dG = energy._sup_subgradient(G, "max")
    assert top == 2.0
    assert np.allclose(dG[0], 0.5 * np.diag([1.0, 0.0])) and np.allclose(dG[2], 0)


def test_lower_semicontinuity_smoke():
    # convex v along laminates converging weakly* to the affine limit
    A = 0.5 * (A1 + A2)
    v = densities.single_well(np.eye(2))
    vals = []
    for k in (2, 4, 8, 16, 32):
        uk = laminates.laminate_from_wells(A1, A2, 0.5, k)
        vals.append(float(uk.mesh.areas @ v(uk.gradients)))
    limit = float(v(A[None])[0])
    assert min(vals[-3:]) >= limit - 1e-12
