import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilip import densities, laminates, matgeom, pamap
from bilip.errors import InputError

A1, A2 = np.diag([1.2, 1.0]), np.diag([0.8, 1.0])

TOML = """
[energy]
kind = "multiwell"
wells = [[1.2, 0, 0, 1], [0.8, 0, 0, 1]]
rho = 4
"""


def test_toml_round_trip(tmp_path):
    v = densities.loads(TOML)
    assert v.kind == "multiwell" and v.rho == 4.0
    assert np.array_equal(v.wells, np.stack([A1, A2]))
    p = tmp_path / "w.toml"
    p.write_text(TOML)
    assert densities.load(p).digest() == v.digest()
    assert densities.from_dict(v.to_dict()).digest() == v.digest()


@pytest.mark.parametrize("text", [
    '[energy]\nkind = "cubic"\nwells = [[1, 0, 0, 1]]',
    '[energy]\nkind = "quadratic"\nwells = [[1, 0, 0, 1], [2, 0, 0, 2]]',
    '[energy]\nwells = [[1, 0, 0]]',
    '[energy]\nkind = "multiwell"',
    '[energy]\nwells = [[1, 0, 0, 1]]\ncolour = 3',
    '[energy]\nwells = [[1, 0, 0, 1]]\nrho = 0.5',
    "[energy\n",
])
def test_bad_toml(text):
    with pytest.raises(InputError):
        densities.loads(text)


def test_values():
    v = densities.double_well(A1, A2)
    G = np.stack([A1, np.eye(2), np.diag([1.0, -1.0])])
    assert np.allclose(v(G)[:2], [0.0, 0.04], atol=1e-15)
    assert v(G)[2] == np.inf
    w = densities.double_well(A1, A2, rho=2.0)
    assert w(np.diag([3.0, 1.0])[None])[0] == np.inf
    assert w(np.eye(2)[None])[0] == pytest.approx(0.04)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 2.0))
def test_gradient_matches_finite_differences(seed, blowup):
    rng = np.random.default_rng(seed)
    v = densities.double_well(A1, A2, blowup=blowup)
    G = np.eye(2) + 0.3 * rng.normal(size=(2, 2))
    if matgeom.det2(G) < 0.2:
        return
    h = 1e-6
    fd = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            E = np.zeros((2, 2))
            E[i, j] = h
            fd[i, j] = (v((G + E)[None])[0] - v((G - E)[None])[0]) / (2 * h)
    # skip points on the switching line between wells
    d = np.sum((G - A1) ** 2) - np.sum((G - A2) ** 2)
    if abs(d) < 1e-4:
        return
    assert np.allclose(v.grad(G), fd, atol=1e-5 * (1 + np.abs(fd).max()))


def test_rank_one_pairs():
    v = densities.EnergyDensity("multiwell", np.stack([A1, A2, np.diag([1.0, 1.3])]))
    pairs = densities.rank_one_pairs(v)
    assert (0, 1) in pairs
    assert (0, 2) not in pairs
    assert densities.rank_one_pairs(densities.single_well(np.eye(2))) == []


def test_rank_one_split():
    b, n = laminates.rank_one_split(A1, A2)
    assert np.allclose(np.outer(b, n), A1 - A2, atol=1e-15)
    assert np.linalg.norm(n) == pytest.approx(1.0)
    assert laminates.rank_one_split(np.eye(2), 2 * np.eye(2)) is None


@pytest.mark.parametrize("wells", [(A1, A2), (np.diag([1.0, 1.2]), np.diag([1.0, 0.8])),
                                   ([[1.0, 0.3], [0.0, 1.1]], [[1.0, -0.3], [0.0, 0.9]])])
@pytest.mark.parametrize("k,lam,c", [(2, 0.5, 0.5), (4, 0.3, 0.25), (16, 0.5, 1.0)])
def test_laminate_exact_energy(wells, k, lam, c):
    W1, W2 = (np.asarray(w, float) for w in wells)
    split = laminates.rank_one_split(W1, W2)
    A = lam * W1 + (1 - lam) * W2
    v = densities.double_well(W1, W2)
    m = laminates.laminate_map(A, *split, lam, k, c)
    assert pamap.certify_injective(m)
    bv = m.mesh.boundary_vertices
    assert np.abs(m.images[bv] - m.mesh.vertices[bv] @ A.T).max() <= 1e-14
    direct = float(m.mesh.areas @ v(m.gradients))
    assert direct == pytest.approx(laminates.laminate_energy_oracle(v, A, *split, lam, k, c), rel=1e-10, abs=1e-15)


def test_laminate_fractions_match_mesh():
    k, lam, c = 8, 0.3, 0.5
    m = laminates.laminate_from_wells(A1, A2, lam, k, c)
    fr = laminates.laminate_fractions(k, lam, c)
    G, a = m.gradients, m.mesh.areas
    on = lambda B: float(a[np.abs(G - B).max(axis=(1, 2)) < 1e-12].sum())
    assert on(A1) == pytest.approx(fr["A1"], abs=1e-13)
    assert on(A2) == pytest.approx(fr["A2"], abs=1e-13)
    assert sum(fr.values()) == pytest.approx(1.0, abs=1e-14)


def test_laminate_errors():
    with pytest.raises(InputError):
        laminates.laminate_from_wells(A1, 2 * A1 + np.eye(2), 0.5, 4)
    with pytest.raises(InputError):
        laminates.laminate_from_wells(A1, A2, 1.0, 4)
    with pytest.raises(InputError, match="boundary layer"):
        laminates.laminate_from_wells(A1, A2, 0.5, 1, c=0.25)


def test_oblique_laminate_is_a_seed():
    b = np.array([0.1, 0.05])
    n = np.array([1.0, 1.0]) / np.sqrt(2)
    m = laminates.laminate_map(np.eye(2), b, n, 0.5, 4, resolution=32)
    assert pamap.certify_injective(m)
    bv = m.mesh.boundary_vertices
    assert np.abs(m.images[bv] - m.mesh.vertices[bv]).max() <= 1e-14
