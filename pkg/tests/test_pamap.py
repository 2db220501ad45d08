import numpy as np
import pytest

from bilip import corpus, meshes, pamap
from bilip.errors import InputError, NumericalError, OutOfDomainError
from bilip.pamap import Mesh2, PAMap


def _compose(f: PAMap, g: PAMap) -> PAMap:
    """g after f, sampled on f's mesh (exact when g is affine)."""
    return PAMap(f.mesh, pamap.eval_points(g, f.images))


def test_eval_identity(unit_mesh):
    u = pamap.identity_map(unit_mesh)
    assert np.allclose(pamap.eval(u, [0.3, 0.7]), [0.3, 0.7], atol=1e-15)


def test_eval_affine(unit_mesh, rng):
    A = np.array([[1.3, 0.2], [-0.1, 0.8]])
    m = pamap.affine_map(unit_mesh, A)
    X = rng.uniform(0, 1, (500, 2))
    assert np.allclose(pamap.eval_points(m, X), X @ A.T, atol=1e-13)


def test_eval_shared_edge_agrees(unit_mesh, rng):
    m = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    C = unit_mesh.cells
    # cells 0 and 1 share the diagonal of the first quad
    shared = np.intersect1d(C[0], C[1])
    assert len(shared) == 2
    a, b = unit_mesh.vertices[shared]
    x = 0.37 * a + 0.63 * b
    v0 = pamap.eval_points(m, x[None], np.array([0]))[0]
    v1 = pamap.eval_points(m, x[None], np.array([1]))[0]
    assert np.allclose(v0, v1, atol=1e-12)


def test_eval_outside_raises(unit_mesh):
    with pytest.raises(OutOfDomainError):
        pamap.eval(pamap.identity_map(unit_mesh), [1.5, 0.5])


def test_gradient_examples(unit_mesh):
    A = np.array([[2.0, 1.0], [0.0, 0.5]])
    m = pamap.affine_map(unit_mesh, A)
    assert all(np.allclose(pamap.gradient(m, k), A, atol=1e-13) for k in range(unit_mesh.n_cells))
    assert np.allclose(pamap.identity_map(unit_mesh).gradients, np.eye(2), atol=1e-14)


def test_gradient_matches_finite_differences():
    V = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.9]])
    m = PAMap(Mesh2(V, np.array([[0, 1, 2]])), np.array([[0.1, 0.3], [1.4, 0.2], [0.5, 1.7]]))
    x, h = np.array([0.4, 0.3]), 1e-5
    fd = np.column_stack([(pamap.eval(m, x + h * e) - pamap.eval(m, x - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(pamap.gradient(m, 0), fd, atol=1e-10)


def test_degenerate_reference_cell_rejected():
    V = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(InputError):
        Mesh2(V, np.array([[0, 1, 2]]))


def test_bilip_constant_examples(unit_mesh):
    assert pamap.bilip_constant(pamap.identity_map(unit_mesh), 2000) == pytest.approx((1.0, 1.0))
    Lc, Ls = pamap.bilip_constant(pamap.affine_map(unit_mesh, np.diag([2.0, 0.5])), 20_000)
    assert Lc == pytest.approx(2.0)
    assert 1.9 <= Ls <= 2.0 + 1e-12


def test_bilip_sandwich(unit_mesh, rng):
    for _ in range(3):
        m = corpus.random_bilip_map(rng, unit_mesh, 3.0)
        Lc, Ls = pamap.bilip_constant(m, 100_000, seed=int(rng.integers(1000)))
        assert Ls <= Lc * (1 + 1e-12)


def test_bilip_singular_cell_raises(unit_mesh):
    Y = unit_mesh.vertices.copy()
    Y[:, 1] = 0.0
    with pytest.raises(NumericalError):
        pamap.bilip_constant(PAMap(unit_mesh, Y), 100)


def test_orientation(unit_mesh, rng):
    assert pamap.is_orientation_preserving(pamap.identity_map(unit_mesh))
    Y = unit_mesh.vertices.copy()
    # the corner (1, 0) lies in a single cell; pulling it across that cell flips it
    k = int(np.argmin(np.linalg.norm(unit_mesh.vertices - [1.0, 0.0], axis=1)))
    Y[k] = [0.8, 0.1]
    assert np.sum(PAMap(unit_mesh, Y).dets <= 0) == 1
    assert not pamap.is_orientation_preserving(PAMap(unit_mesh, Y))
    f = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    g = pamap.affine_map(f.image_mesh, np.array([[1.0, 0.4], [0.0, 1.5]]))
    h = _compose(f, g)
    assert pamap.is_orientation_preserving(h)


def test_chain_rule(unit_mesh, rng):
    f = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    B = np.array([[0.7, -0.3], [0.2, 1.1]])
    h = _compose(f, pamap.affine_map(f.image_mesh, B))
    assert np.allclose(h.gradients, B @ f.gradients, atol=1e-12)


def test_certify_examples(unit_mesh):
    assert pamap.certify_injective(pamap.identity_map(unit_mesh))
    assert pamap.certify_injective(pamap.affine_map(unit_mesh, [[0.2, -3.0], [1.0, 0.5]]))
    Y = unit_mesh.vertices.copy()
    k = unit_mesh.interior_vertices[len(unit_mesh.interior_vertices) // 2]
    Y[k] += [0.4, 0.3]
    rep = pamap.injectivity_report(PAMap(unit_mesh, Y))
    assert not rep["injective"] and rep["n_nonpositive"] > 0


def test_certify_detects_boundary_overlap():
    # all cells positive but the boundary image wraps onto itself
    m = meshes.grid_mesh(0, 0, 4, 1, 16, 1)
    th = m.vertices[:, 0] * (2.4 * np.pi / 4)
    rad = 1.0 - 0.2 * m.vertices[:, 1]
    Y = np.column_stack([rad * np.cos(th), rad * np.sin(th)])
    w = PAMap(m, Y)
    assert pamap.is_orientation_preserving(w)
    rep = pamap.injectivity_report(w)
    assert not rep["injective"] and rep["witness"] is not None


def test_inverse_eval_examples(unit_mesh):
    assert np.allclose(pamap.inverse_eval(pamap.identity_map(unit_mesh), [0.2, 0.2]), [0.2, 0.2])
    A = np.array([[1.5, 0.5], [0.0, 0.8]])
    m = pamap.affine_map(unit_mesh, A)
    y = np.array([0.9, 0.4])
    assert np.allclose(pamap.inverse_eval(m, y), np.linalg.solve(A, y), atol=1e-12)
    with pytest.raises(OutOfDomainError):
        pamap.inverse_eval(m, [10.0, 10.0])


def test_inverse_round_trip(unit_mesh, rng):
    m = corpus.random_bilip_map(rng, unit_mesh, 3.0)
    X = pamap.sample_points(unit_mesh, 1000, rng)
    Y = pamap.eval_points(m, X)
    assert np.abs(pamap.eval_points(m, pamap.inverse_eval(m, Y)) - Y).max() < 1e-9
    assert np.abs(pamap.inverse_eval(m, Y) - X).max() < 1e-9
    Gi = pamap.inverse_gradient_at(m, Y[:20])
    G = pamap.gradient_at(m, X[:20])
    assert np.allclose(np.einsum("nij,njk->nik", Gi, G), np.eye(2), atol=1e-10)


def test_rescale(unit_mesh, rng):
    c = np.array([0.3, 0.4])
    r = pamap.rescale(pamap.identity_map(unit_mesh), c, 0.5)
    assert np.allclose(r.images, r.mesh.vertices, atol=1e-15)
    A = np.array([[1.2, 0.3], [0.1, 0.9]])
    assert np.allclose(pamap.rescale(pamap.affine_map(unit_mesh, A), c, 0.25).gradients, A, atol=1e-12)
    m = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    s = pamap.rescale(m, c, 0.1)
    assert pamap.bilip_constant(s, 1000)[0] == pytest.approx(pamap.bilip_constant(m, 1000)[0], rel=1e-12)
    with pytest.raises(InputError):
        pamap.rescale(m, c, 0.0)


def test_uniform_limit_keeps_constant(unit_mesh, rng):
    # y_k = y + g / k converges uniformly to y with a common constant
    y = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    L = max(pamap.bilip_constant(y, 100)[0], 1.0)
    g = 0.01 * np.sin(7 * unit_mesh.vertices)
    Ls = []
    for k in (1, 2, 4, 8, 16):
        yk = PAMap(unit_mesh, y.images + g / k)
        assert pamap.certify_injective(yk)
        Ls.append(pamap.bilip_constant(yk, 100)[0])
    assert Ls[-1] == pytest.approx(L, rel=0.02)


def test_restrict_to_segment_exact(unit_mesh, rng):
    m = corpus.random_bilip_map(rng, unit_mesh, 2.0)
    a, b = np.array([0.05, 0.1]), np.array([0.93, 0.71])
    T, vals = pamap.restrict_to_segment(m, a, b)
    assert T[0] == 0.0 and T[-1] == 1.0 and np.all(np.diff(T) > 0)
    t = rng.uniform(0, 1, 200)
    interp = np.column_stack([np.interp(t, T, vals[:, i]) for i in range(2)])
    assert np.allclose(interp, pamap.eval_points(m, a + t[:, None] * (b - a)), atol=1e-12)
