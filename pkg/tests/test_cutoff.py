import numpy as np
import pytest
import shapely
from scipy.optimize import brentq
from shapely.geometry import LineString, MultiLineString, box

from bilip import corpus, cutoff, laminates, meshes, pamap, tiling, ym
from bilip.errors import PreconditionError
from bilip.pamap import PAMap
from bilip.tiling import GAMMA, Domain2

UNIT = Domain2.rectangle(0, 0, 1, 1)


@pytest.fixture(scope="module")
def ring():
    g = tiling.build_tiling(UNIT, 0.25)
    return g, corpus.grid_mesh_for(g)


@pytest.fixture(scope="module")
def identity_result(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    return cutoff.cutoff(I, I, g, 1.0, n_pairs=20_000)


def test_closeness_examples(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    assert cutoff.check_closeness(I, I, g, 2.0)
    L = 2.0
    lvl = cutoff.closeness_level(g.r, L)
    far = PAMap(mesh, mesh.vertices + [2 * lvl, 0.0])
    assert not cutoff.check_closeness(far, I, g, L)


def test_closeness_threshold_is_closed(ring, monkeypatch):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    monkeypatch.setattr(cutoff, "sup_distance", lambda a, b, grid: cutoff.closeness_level(grid.r, 1.5))
    assert cutoff.check_closeness(I, I, g, 1.5)


def test_find_xi_identity(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    w = g.vertices[g.gamma_vertices[0]]
    for arm in ([1, 0], [0, 1], [-1, 0], [0, -1]):
        assert cutoff.find_xi(w, arm, True, I, I, g.r, 1.0) == pytest.approx(0.25, abs=1e-9)


@pytest.mark.parametrize("L", [1.0, 1.5, 2.0])
def test_find_xi_stretch(ring, L):
    g, mesh = ring
    m = pamap.affine_map(mesh, np.diag([L, 1 / L]))
    w = g.vertices[g.gamma_vertices[3]]
    xi = cutoff.find_xi(w, [1, 0], False, m, m, g.r, L)
    assert xi == pytest.approx(1 / (4 * L * L), abs=1e-9)
    a, b = cutoff.xi_bounds(L)
    assert a <= xi <= b


def test_find_xi_without_root(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    far = PAMap(mesh, mesh.vertices + [0.0, 0.5])
    with pytest.raises(PreconditionError):
        cutoff.find_xi(g.vertices[g.gamma_vertices[0]], [1, 0], True, far, I, g.r, 1.0)


def test_find_xi_matches_dense_scan(ring):
    g, mesh = ring
    rng = np.random.default_rng(7)
    V = g.vertices
    for L in (1.0, 2.0):
        yt, y = corpus.random_close_pair(rng, mesh, g.r, L)
        for v in rng.choice(g.gamma_vertices, 6, replace=False):
            w = V[v]
            yw = pamap.eval_points(y, w[None])[0]
            for nb in g.neighbours(int(v)):
                inner = g.label_of(int(v), nb) == "INNER"
                f = yt if inner else y
                d = V[nb] - w

                def h(t):
                    P = w + np.atleast_1d(t)[:, None] * d
                    return np.linalg.norm(pamap.eval_points(f, P) - yw, axis=1) - g.r / (4 * L)
                ts = np.linspace(0, 1, 10_001)
                hv = h(ts)
                k = np.nonzero(np.sign(hv[1:]) != np.sign(hv[:-1]))[0][-1]
                ref = brentq(lambda t: h(t)[0], ts[k], ts[k + 1], xtol=1e-13)
                xi = cutoff.find_xi(w, d / g.r, inner, yt, y, g.r, L)
                assert xi == pytest.approx(ref, abs=1e-8)


def test_crosses_identity(ring, identity_result):
    g, _ = ring
    cr = identity_result.crosses
    assert len(cr) == len(g.gamma_vertices)
    for c in cr:
        assert len(c.arms) == 4
        assert np.allclose(c.xi, 0.25, atol=1e-9)


def test_adjacent_crosses_separated(ring):
    g, mesh = ring
    rng = np.random.default_rng(3)
    yt, y = corpus.random_close_pair(rng, mesh, g.r, 2.0)
    cr = cutoff.build_crosses(g, yt, y, 2.0)
    shape = {c.vertex: MultiLineString([[c.w, p] for p in c.extremals]) for c in cr}
    gam = [e for e, l in zip(g.edges, g.labels) if l == GAMMA]
    for a, b in gam:
        assert shape[int(a)].distance(shape[int(b)]) >= g.r / 3 - 1e-12


def test_edge_map_identity(ring, identity_result):
    em = identity_result.edge_map
    for e in range(len(em.s)):
        P = em.positions(np.full(len(em.s[e]), e), em.s[e])
        assert np.allclose(em.values[e], P, atol=1e-14)


def test_edge_map_junctions(ring):
    g, mesh = ring
    rng = np.random.default_rng(11)
    yt, y = corpus.random_close_pair(rng, mesh, g.r, 2.0)
    cr = cutoff.build_crosses(g, yt, y, 2.0)
    em = cutoff.edge_map(g, cr, yt, y)
    for c in cr[::5]:
        for i, nb in enumerate(c.neighbours):
            e = g.edge_between(c.vertex, nb)
            at_w = 0.0 if g.edges[e][0] == c.vertex else 1.0
            at_p = c.xi[i] if at_w == 0.0 else 1.0 - c.xi[i]
            assert np.array_equal(em.eval([e], [at_w])[0], c.y_w)
            f = yt if c.inner[i] else y
            assert np.allclose(em.eval([e], [at_p])[0], pamap.eval_points(f, c.extremals[i][None])[0], atol=1e-12)


def test_grid_bilip_identity(identity_result):
    rep = identity_result.grid_report
    assert rep["ok"] and rep["measured"] == pytest.approx(1.0, abs=1e-8)


def test_grid_bilip_random_pairs(ring):
    g, mesh = ring
    rng = np.random.default_rng(5)
    for _ in range(3):
        yt, y = corpus.random_close_pair(rng, mesh, g.r, 2.0)
        em = cutoff.edge_map(g, cutoff.build_crosses(g, yt, y, 2.0), yt, y)
        rep = cutoff.grid_bilip_report(em, 2.0, 100_000)
        assert rep["pairs"] >= 100_000
        assert rep["measured"] <= 36.0
        for name, st in rep["steps"].items():
            assert st["ok"], name


def test_grid_bilip_reports_violations_honestly(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    # ytilde folds the inner edges far from y: closeness fails badly
    Y = mesh.vertices.copy()
    Y[:, 0] += 0.2 * g.r * np.sin(40 * mesh.vertices[:, 1])
    far = PAMap(mesh, Y)
    assert not cutoff.check_closeness(far, I, g, 1.0)
    try:
        cr = cutoff.build_crosses(g, far, I, 1.0)
    except PreconditionError:
        return
    em = cutoff.edge_map(g, cr, far, I)
    ok, measured = cutoff.verify_grid_bilip(em, 1.0, 20_000)
    assert np.isfinite(measured) and ok == (measured <= 18.0 * (1 + 1e-9))


def test_glue_equal_maps(identity_result, ring):
    g, mesh = ring
    u = identity_result.u
    assert pamap.certify_injective(u)
    assert np.allclose(u.images, u.mesh.vertices, atol=1e-12)
    assert identity_result.modified_area == 0.0
    I = pamap.identity_map(mesh)
    ub = u.mesh.boundary_vertices
    tree = {tuple(p): k for k, p in enumerate(mesh.vertices[mesh.boundary_vertices])}
    for k in ub:
        j = tree.get(tuple(u.mesh.vertices[k]))
        if j is not None:
            assert np.array_equal(u.images[k], I.images[mesh.boundary_vertices[j]])


def test_cutoff_random_pair(ring):
    g, mesh = ring
    rng = np.random.default_rng(2)
    yt, y = corpus.random_close_pair(rng, mesh, g.r, 2.0)
    res = cutoff.cutoff(yt, y, g, 2.0, n_pairs=20_000)
    rep = res.report()
    assert rep["injective"] and rep["orientation_preserving"] and rep["trace_exact"]
    a = g.partition_areas()
    assert res.modified_area <= a["STRIP"] + a["BOUND"] + 1e-12
    # u equals ytilde on the bulk and y on the collar
    bulk = g.region_polygon("BULK").buffer(-1e-9)
    C = res.u.mesh.centroids
    inb = shapely.contains_xy(bulk, C[:, 0], C[:, 1])
    assert np.allclose(res.u.gradients[inb], pamap.gradient_at(yt, C[inb]), atol=1e-10)


def test_cutoff_rejects_far_pair(ring):
    g, mesh = ring
    I = pamap.identity_map(mesh)
    far = PAMap(mesh, mesh.vertices + [g.r, 0.0])
    with pytest.raises(PreconditionError):
        cutoff.cutoff(far, I, g, 1.0)


def test_conform_to_grid_is_exact():
    g = tiling.build_tiling(UNIT, 0.25)
    lam = laminates.laminate_from_wells(np.diag([1.1, 1.0]), np.diag([0.9, 1.0]), 0.3, 3)
    c = cutoff.conform_to_grid(lam, g)
    assert pamap.certify_injective(c)
    X = pamap.sample_points(c.mesh, 2000, np.random.default_rng(0))
    assert np.abs(pamap.eval_points(c, X) - pamap.eval_points(lam, X)).max() < 1e-12
    Q = (c.mesh.vertices[c.mesh.cells] - g.origin) / g.r
    span = np.ceil(Q.max(axis=1) - 1e-9) - np.floor(Q.min(axis=1) + 1e-9)
    assert span.max() <= 1
    assert c.mesh.area == pytest.approx(1.0)


def test_sequence_constant():
    mesh = meshes.grid_mesh(0, 0, 1, 1, 32)
    I = pamap.identity_map(mesh)
    out = cutoff.cutoff_sequence([I, I], I, [0.5], 1.0, n_pairs=2000)
    assert len(out) == 1
    assert np.allclose(out[0].u.images, out[0].u.mesh.vertices, atol=1e-12)


@pytest.mark.slow
def test_sequence_laminates():
    A1, A2 = np.diag([1.02, 1.0]), np.diag([0.98, 1.0])
    A = 0.5 * (A1 + A2)
    seq = [laminates.laminate_from_wells(A1, A2, 0.5, k) for k in (2, 4, 8, 16, 32)]
    y = pamap.affine_map(seq[0].mesh, A)
    out = cutoff.cutoff_sequence(seq, y, [0.5, 0.25], 1.03, n_pairs=5000)
    assert [r.delta for r in out] == [0.5, 0.25]
    assert out[0].index <= out[1].index
    fr = [r.modified_fraction for r in out]
    assert fr[0] > fr[1] and all(f <= r.delta for f, r in zip(fr, out))
    sq = box(0, 0, 1, 1)
    for r in out:
        u = r.u
        bd = u.mesh.boundary_vertices
        assert np.allclose(u.images[bd], u.mesh.vertices[bd] @ A.T, atol=1e-13)
        # gradients only change on the modified set, so the histograms differ by at most its area
        mu = ym.empirical_measure([u], sq)
        mk = ym.empirical_measure([seq[r.index]], sq)
        assert ym.total_variation(mu, mk)[0] <= r.modified_fraction + 1e-9
