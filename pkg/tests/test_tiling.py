import numpy as np
import pytest
import shapely
from shapely.geometry import LineString, box

from bilip import tiling
from bilip.errors import InputError
from bilip.tiling import BOUND, BULK, GAMMA, STRIP, Domain2

L_SHAPE = Domain2(np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], float))
UNIT = Domain2.rectangle(0, 0, 1, 1)


def _leaks(grid) -> bool:
    """Geometric oracle: cut the domain along Gamma and ask whether the piece
    holding the boundary collar also touches the bulk."""
    V = grid.vertices
    cuts = [LineString(V[e]) for e, l in zip(grid.edges, grid.labels) if l == GAMMA]
    cut = shapely.union_all(cuts).buffer(1e-7 * grid.r, cap_style="square")
    pieces = grid.domain.polygon.difference(cut)
    pieces = list(pieces.geoms) if hasattr(pieces, "geoms") else [pieces]
    bound = grid.region_polygon(BOUND).buffer(-1e-3 * grid.r)
    bulk = grid.region_polygon(BULK).buffer(-1e-3 * grid.r)
    return any(p.intersects(bound) and p.intersects(bulk) for p in pieces)


def _random_domain(rng, size=7):
    for _ in range(100):
        mask = rng.random((size, size)) < 0.75
        mask[size // 2, size // 2] = True
        poly = shapely.union_all([box(i, j, i + 1, j + 1) for j, i in zip(*np.nonzero(mask))])
        if poly.geom_type != "Polygon" or not poly.is_valid:
            continue
        poly = shapely.simplify(poly, 0)
        try:
            return Domain2(np.asarray(poly.exterior.coords)[:-1],
                           tuple(np.asarray(h.coords)[:-1] for h in poly.interiors))
        except InputError:
            continue
    raise RuntimeError("no domain drawn")


def test_strip_unit_square():
    s = tiling.boundary_strip(UNIT, 0.2)
    assert s.area == pytest.approx(1 - 0.6 ** 2, rel=1e-12)
    assert s.area < UNIT.area
    assert s.contains(shapely.Point(0.1, 0.5)) and not s.intersects(shapely.Point(0.5, 0.5))


def test_strip_l_shape_matches_raster():
    s = tiling.boundary_strip(L_SHAPE, 0.1)
    h = 1e-3
    c = np.arange(h / 2, 2, h)
    X, Y = np.meshgrid(c, c)
    P = shapely.points(X.ravel(), Y.ravel())
    inside = shapely.contains(L_SHAPE.polygon, P)
    d = shapely.distance(L_SHAPE.polygon.exterior, P[inside])
    raster = np.sum(d < 0.1) * h * h
    assert s.area == pytest.approx(raster, rel=0.01)


def test_strip_swallowing_domain_rejected():
    with pytest.raises(InputError):
        tiling.boundary_strip(UNIT, 0.5)
    with pytest.raises(InputError):
        tiling.build_tiling(UNIT, 0.6)


def test_domain_validation():
    with pytest.raises(InputError):
        Domain2(np.array([[0, 0], [1, 0], [1.5, 1], [0, 1]], float))
    with pytest.raises(InputError):
        Domain2(np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float), (np.array([[1, 1], [3, 1], [3, 1.5], [1, 1.5]], float),))


def test_unit_square_quarter():
    g = tiling.build_tiling(UNIT, 0.25)
    assert g.r == pytest.approx(1 / 16)
    gam = np.array([l == GAMMA for l in g.labels])
    E = g.edges[gam]
    deg = np.bincount(E.ravel(), minlength=len(g.vertices))
    assert set(deg[deg > 0].tolist()) == {2}
    # one connected cycle around the square
    P = g.vertices[np.unique(E)]
    assert P.min(axis=0) == pytest.approx([2 / 16, 2 / 16]) and P.max(axis=0) == pytest.approx([14 / 16, 14 / 16])
    assert len(E) == 4 * 12
    assert shapely.line_merge(shapely.union_all([LineString(g.vertices[e]) for e in E])).is_ring


@pytest.mark.parametrize("dom, delta", [(UNIT, 0.25), (UNIT, 0.1), (L_SHAPE, 0.2)])
def test_grid_invariants(dom, delta):
    g = tiling.build_tiling(dom, delta)
    assert g.r <= delta / 4 + 1e-15
    for v in g.gamma_vertices:
        assert len(g.neighbours(v)) == 4
    a = g.partition_areas()
    assert a[BULK] + a[STRIP] + a[BOUND] == pytest.approx(dom.area, abs=1e-9)
    regions = [g.region_polygon(k) for k in (BULK, STRIP, BOUND)]
    for i in range(3):
        for j in range(i + 1, 3):
            assert regions[i].intersection(regions[j]).area < 1e-12
    strip = tiling.boundary_strip(dom, delta)
    centers = np.array([c for c, _ in g.squares])
    assert shapely.contains_xy(strip, centers[:, 0], centers[:, 1]).all()
    assert a[STRIP] + a[BOUND] <= strip.area + 1e-12
    # Gamma inside the open strip
    inner = regions[1].buffer(-1e-9)
    mids = g.vertices[g.edges[[l == GAMMA for l in g.labels]]].mean(axis=1)
    assert shapely.contains_xy(regions[1], mids[:, 0], mids[:, 1]).all()
    assert inner.area > 0
    assert tiling.separation_check(g)


def test_squares_conform():
    g = tiling.build_tiling(L_SHAPE, 0.4)
    assert {h for _, h in g.squares} == {g.r / 2}
    # integer lattice boxes, so intersections are exact
    boxes = [box(i, j, i + 1, j + 1) for i, j in g.strip_squares]
    tree = shapely.STRtree(boxes)
    for i, b in enumerate(boxes):
        for j in tree.query(b):
            if j <= i:
                continue
            inter = b.intersection(boxes[j])
            assert inter.area == 0
            assert inter.geom_type in ("Point", "LineString")
            if inter.geom_type == "LineString":
                assert inter.length == 1


def test_deleted_gamma_edge_leaks():
    g = tiling.build_tiling(UNIT, 0.25)
    labels = list(g.labels)
    labels[labels.index(GAMMA)] = "INNER"
    broken = g.with_labels(labels)
    assert not tiling.separation_check(broken)
    assert _leaks(broken)
    assert not _leaks(g)


def test_separation_agrees_with_geometric_oracle(rng):
    checked = 0
    for _ in range(12):
        dom = _random_domain(rng)
        try:
            g = tiling.build_tiling(dom, 0.5)
        except InputError:
            continue
        checked += 1
        assert tiling.separation_check(g) == (not _leaks(g))
        labels = list(g.labels)
        k = int(rng.choice(np.nonzero([l == GAMMA for l in labels])[0]))
        labels[k] = "OUTER"
        b = g.with_labels(labels)
        assert tiling.separation_check(b) == (not _leaks(b))
    assert checked >= 3


def test_modified_region_shrinks_with_delta():
    areas = []
    for k in range(2, 6):
        d = 2.0 ** -k
        g = tiling.build_tiling(UNIT, d)
        a = g.partition_areas()
        areas.append(a[STRIP] + a[BOUND])
        assert areas[-1] <= d * UNIT.perimeter
    assert all(x > y for x, y in zip(areas, areas[1:]))


def test_thin_domain_rejected():
    thin = Domain2.rectangle(0, 0, 4, 0.25)
    assert tiling.build_tiling(thin, 0.12).r <= 0.03
    with pytest.raises(InputError, match="inradius"):
        tiling.build_tiling(thin, 0.13)


def test_grid_json_round_trip():
    g = tiling.build_tiling(L_SHAPE, 0.2)
    h = tiling.GridComplex.from_json(g.to_json())
    assert h.labels == g.labels and np.array_equal(h.edges, g.edges) and h.r == g.r
