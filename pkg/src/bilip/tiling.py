"""Boundary strip, its square tiling and the separating edge layer Gamma.

Domains are axis-aligned rectilinear polygons (holes allowed) whose vertices
sit on a common lattice. The domain is rasterised into lattice squares of
side r. Every square gets a chessboard layer index: layer 0 touches the
boundary (possibly at a corner only), layer k is at chessboard distance k from
the layer-0 collar. Layers 1 and 2 form the tiled strip Omega_r, Gamma is the
edge cycle between them, layer 0 is BOUND and layers >= 3 are BULK.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, reduce
from math import gcd
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import shapely
from scipy import ndimage
from shapely.geometry import Polygon, box

from .errors import InputError

GAMMA, INNER, OUTER = "GAMMA", "INNER", "OUTER"
BULK, STRIP, BOUND = "BULK", "STRIP", "BOUND"


def _lattice_spacing(coords: np.ndarray) -> Tuple[np.ndarray, float]:
    origin = coords.min(axis=0)
    fr = [Fraction(float(v)).limit_denominator(10 ** 6) for v in (coords - origin).ravel()]
    fr = [f for f in fr if f != 0]
    if not fr:
        raise InputError("degenerate domain")
    num = reduce(gcd, [f.numerator for f in fr])
    den = reduce(lambda a, b: a * b // gcd(a, b), [f.denominator for f in fr])
    return origin, num / den


@dataclass(frozen=True, eq=False)
class Domain2:
    outer: np.ndarray
    holes: Tuple[np.ndarray, ...] = ()
    lattice: Optional[float] = None

    def __post_init__(self):
        outer = np.asarray(self.outer, float)
        holes = tuple(np.asarray(h, float) for h in self.holes)
        for ring in (outer,) + holes:
            if ring.ndim != 2 or ring.shape[1] != 2 or len(ring) < 4:
                raise InputError("polygon rings need at least 4 (x, y) vertices")
            d = np.diff(np.vstack([ring, ring[:1]]), axis=0)
            if np.any((np.abs(d[:, 0]) > 0) & (np.abs(d[:, 1]) > 0)):
                raise InputError("domain polygons must be axis-aligned (rectilinear)")
        poly = Polygon(outer, holes)
        if not poly.is_valid or poly.area <= 0:
            raise InputError("domain polygon is not simple or holes are not strictly inside")
        allc = np.vstack((outer,) + holes)
        origin, h = _lattice_spacing(allc)
        if self.lattice is not None:
            q = (allc - origin) / self.lattice
            if np.abs(q - np.round(q)).max() > 1e-9:
                raise InputError("domain vertices are not on the declared lattice")
            h = float(self.lattice)
        object.__setattr__(self, "outer", outer)
        object.__setattr__(self, "holes", holes)
        object.__setattr__(self, "lattice", h)

    @cached_property
    def polygon(self) -> Polygon:
        return Polygon(self.outer, self.holes)

    @property
    def origin(self) -> np.ndarray:
        return np.vstack((self.outer,) + self.holes).min(axis=0)

    @property
    def area(self) -> float:
        return float(self.polygon.area)

    @property
    def perimeter(self) -> float:
        return float(self.polygon.length)

    @classmethod
    def rectangle(cls, x0, y0, x1, y1) -> "Domain2":
        return cls(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float))

    def to_json(self) -> dict:
        return {"schema": "domain.v1", "outer": self.outer.tolist(),
                "holes": [h.tolist() for h in self.holes], "lattice": self.lattice}

    @classmethod
    def from_json(cls, d: dict) -> "Domain2":
        try:
            return cls(np.asarray(d["outer"], float), tuple(np.asarray(h, float) for h in d.get("holes", [])),
                       d.get("lattice"))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed domain.v1 document: {exc}") from exc


def boundary_strip(dom: Domain2, delta: float):
    """The open strip {x in Omega : dist(x, boundary) < delta} as a shapely geometry."""
    if not delta > 0:
        raise InputError("delta must be positive")
    core = dom.polygon.buffer(-delta, quad_segs=64)
    if core.is_empty:
        raise InputError(f"delta={delta} is not below the inradius: the strip swallows the domain")
    return dom.polygon.difference(core)


@dataclass(frozen=True, eq=False)
class GridComplex:
    domain: Domain2
    delta: float
    r: float
    origin: np.ndarray
    layers: np.ndarray          # (ny, nx) chessboard layer, -1 outside
    lattice_vertices: np.ndarray  # (V, 2) integer lattice coordinates
    edges: np.ndarray           # (E, 2) vertex indices, lexicographically ordered endpoints
    labels: Tuple[str, ...]

    @property
    def vertices(self) -> np.ndarray:
        return self.origin + self.r * self.lattice_vertices

    @cached_property
    def vertex_index(self) -> Dict[Tuple[int, int], int]:
        return {(int(i), int(j)): k for k, (i, j) in enumerate(self.lattice_vertices)}

    @cached_property
    def edge_index(self) -> Dict[Tuple[int, int], int]:
        return {(int(a), int(b)): k for k, (a, b) in enumerate(self.edges)}

    def edge_between(self, a: int, b: int) -> Optional[int]:
        k = self.edge_index.get((min(a, b), max(a, b)))
        return k

    @cached_property
    def partition(self) -> np.ndarray:
        """(ny, nx) array of partition labels ('' outside)."""
        out = np.full(self.layers.shape, "", dtype=object)
        out[self.layers == 0] = BOUND
        out[(self.layers == 1) | (self.layers == 2)] = STRIP
        out[self.layers >= 3] = BULK
        return out

    @cached_property
    def strip_squares(self) -> np.ndarray:
        """(S, 2) integer lower-left corners (i, j) of the strip squares."""
        j, i = np.nonzero((self.layers == 1) | (self.layers == 2))
        return np.column_stack([i, j])

    @property
    def squares(self) -> List[Tuple[np.ndarray, float]]:
        """(center, half-size) of every strip square; the side length is r."""
        return [(self.origin + self.r * (sq + 0.5), self.r / 2) for sq in self.strip_squares]

    def partition_areas(self) -> Dict[str, float]:
        a = self.r ** 2
        return {BULK: float(np.sum(self.layers >= 3) * a),
                STRIP: float(np.sum((self.layers == 1) | (self.layers == 2)) * a),
                BOUND: float(np.sum(self.layers == 0) * a)}

    def region_mask(self, name: str) -> np.ndarray:
        return self.partition == name

    @cached_property
    def gamma_vertices(self) -> np.ndarray:
        g = np.array([l == GAMMA for l in self.labels])
        return np.unique(self.edges[g])

    def label_of(self, a: int, b: int) -> str:
        return self.labels[self.edge_between(a, b)]

    def neighbours(self, v: int) -> List[int]:
        """The (up to) four lattice neighbours of v joined to it by strip edges,
        ordered E, N, W, S."""
        i, j = self.lattice_vertices[v]
        out = []
        for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
            w = self.vertex_index.get((int(i + di), int(j + dj)))
            if w is not None and self.edge_between(v, w) is not None:
                out.append(w)
        return out

    def with_labels(self, labels: Sequence[str]) -> "GridComplex":
        return GridComplex(self.domain, self.delta, self.r, self.origin, self.layers,
                           self.lattice_vertices, self.edges, tuple(labels))

    def region_polygon(self, name: str):
        """Union of the lattice squares of one partition class (shapely)."""
        j, i = np.nonzero(self.region_mask(name))
        boxes = [box(*(self.origin + self.r * np.array([a, b])), *(self.origin + self.r * np.array([a + 1, b + 1])))
                 for a, b in zip(i, j)]
        return shapely.union_all(boxes)

    def to_json(self) -> dict:
        areas = self.partition_areas()
        return {
            "schema": "grid.v1",
            "domain": self.domain.to_json(),
            "delta": self.delta,
            "r": self.r,
            "origin": self.origin.tolist(),
            "layers": self.layers.tolist(),
            "lattice_vertices": self.lattice_vertices.tolist(),
            "vertices": self.vertices.tolist(),
            "edges": self.edges.tolist(),
            "labels": list(self.labels),
            "squares": [{"center": c.tolist(), "half": h} for c, h in self.squares],
            "partition": {k: areas[k] for k in sorted(areas)},
        }

    @classmethod
    def from_json(cls, d: dict) -> "GridComplex":
        try:
            dom = Domain2.from_json(d["domain"])
            labels = tuple(d["labels"])
            if any(l not in (GAMMA, INNER, OUTER) for l in labels):
                raise InputError("unknown edge label in grid.v1")
            return cls(dom, float(d["delta"]), float(d["r"]), np.asarray(d["origin"], float),
                       np.asarray(d["layers"], np.int64), np.asarray(d["lattice_vertices"], np.int64),
                       np.asarray(d["edges"], np.int64).reshape(-1, 2), labels)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed grid.v1 document: {exc}") from exc


def rasterize(dom: Domain2, r: float) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean (ny, nx) mask of lattice squares of side r inside the domain."""
    x0, y0, x1, y1 = dom.polygon.bounds
    nx = int(round((x1 - x0) / r))
    ny = int(round((y1 - y0) / r))
    cx = x0 + (np.arange(nx) + 0.5) * r
    cy = y0 + (np.arange(ny) + 0.5) * r
    X, Y = np.meshgrid(cx, cy)
    mask = shapely.contains_xy(dom.polygon, X, Y)
    return np.array([x0, y0]), mask


def chessboard_layers(mask: np.ndarray) -> np.ndarray:
    pad = np.pad(mask, 1, constant_values=False)
    d = ndimage.distance_transform_cdt(pad, metric="chessboard")[1:-1, 1:-1]
    return np.where(mask, d - 1, -1).astype(np.int64)


def _grid_from_layers(dom: Domain2, delta: float, r: float, origin: np.ndarray,
                      layers: np.ndarray) -> GridComplex:
    strip = (layers == 1) | (layers == 2)
    j, i = np.nonzero(strip)
    corners = np.stack([np.column_stack([i, j]), np.column_stack([i + 1, j]),
                        np.column_stack([i + 1, j + 1]), np.column_stack([i, j + 1])], axis=1)
    lv, inv = np.unique(corners.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 4)
    e = np.concatenate([inv[:, [0, 1]], inv[:, [1, 2]], inv[:, [3, 2]], inv[:, [0, 3]]])
    e = np.sort(e, axis=1)
    edges = np.unique(e, axis=0)
    ny, nx = layers.shape

    def layer_at(ii, jj):
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        out = np.full(ii.shape, -1)
        out[ok] = layers[jj[ok], ii[ok]]
        return out

    A = lv[edges[:, 0]]
    B = lv[edges[:, 1]]
    horiz = A[:, 1] == B[:, 1]
    lo = np.minimum(A, B)
    # squares on either side: horizontal edge at height J separates (i, J-1) and (i, J)
    s1 = np.where(horiz[:, None], np.column_stack([lo[:, 0], lo[:, 1] - 1]), np.column_stack([lo[:, 0] - 1, lo[:, 1]]))
    s2 = lo
    l1 = layer_at(s1[:, 0], s1[:, 1])
    l2 = layer_at(s2[:, 0], s2[:, 1])
    pair = np.sort(np.column_stack([l1, l2]), axis=1)
    is_gamma = (pair[:, 0] == 1) & (pair[:, 1] == 2)
    is_inner = ~is_gamma & (pair[:, 1] >= 2)
    labels = tuple(GAMMA if g else (INNER if n else OUTER) for g, n in zip(is_gamma, is_inner))
    return GridComplex(dom, float(delta), float(r), origin, layers, lv, edges, labels)


def build_tiling(dom: Domain2, delta: float, max_refine: int = 64) -> GridComplex:
    """Tile the boundary strip with squares of the largest admissible side r <= delta/4."""
    if not delta > 0:
        raise InputError("delta must be positive")
    eroded = dom.polygon.buffer(-delta, quad_segs=64)
    if eroded.is_empty:
        raise InputError(f"delta={delta} is not below the inradius of the domain")
    h = dom.lattice
    m0 = max(1, int(np.ceil(h / (delta / 4.0) - 1e-12)))
    reasons = []
    for m in range(m0, m0 * max_refine + 1):
        r = h / m
        origin, mask = rasterize(dom, r)
        layers = chessboard_layers(mask)
        if not np.any(layers >= 3):
            reasons.append(f"r={r:g}: no bulk squares")
            continue
        # closed strip squares must lie in the open strip dist < delta
        j, i = np.nonzero((layers == 1) | (layers == 2))
        lo = origin + r * np.column_stack([i, j])
        boxes = shapely.box(lo[:, 0], lo[:, 1], lo[:, 0] + r, lo[:, 1] + r)
        if np.any(shapely.intersects(boxes, eroded)):
            reasons.append(f"r={r:g}: strip squares leave the delta-strip")
            continue
        grid = _grid_from_layers(dom, delta, r, origin, layers)
        if GAMMA not in grid.labels:
            reasons.append(f"r={r:g}: no separating layer")
            continue
        if any(len(grid.neighbours(v)) != 4 for v in grid.gamma_vertices):
            reasons.append(f"r={r:g}: Gamma touches the strip boundary")
            continue
        return grid
    raise InputError("no admissible tiling: the domain is too thin for delta="
                     f"{delta}; tried {'; '.join(reasons[:3])}")


def separation_check(grid: GridComplex) -> bool:
    """True iff no path of squares from the boundary collar reaches BULK
    without crossing a Gamma edge (diagonal moves blocked at Gamma vertices)."""
    layers = grid.layers
    ny, nx = layers.shape
    gam_edges = set()
    gam_verts = set()
    for (a, b), lab in zip(grid.edges, grid.labels):
        if lab == GAMMA:
            pa = tuple(int(v) for v in grid.lattice_vertices[a])
            pb = tuple(int(v) for v in grid.lattice_vertices[b])
            gam_edges.add((min(pa, pb), max(pa, pb)))
            gam_verts.update([pa, pb])
    inside = layers >= 0
    seen = np.zeros_like(inside)
    stack = [(int(i), int(j)) for j, i in zip(*np.nonzero(layers == 0))]
    for i, j in stack:
        seen[j, i] = True
    while stack:
        i, j = stack.pop()
        if layers[j, i] >= 3:
            return False
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            a, b = i + di, j + dj
            if not (0 <= a < nx and 0 <= b < ny) or not inside[b, a] or seen[b, a]:
                continue
            if di and dj:
                corner = (max(i, a), max(j, b))
                if corner in gam_verts:
                    continue
            else:
                if di:
                    p, q = (max(i, a), j), (max(i, a), j + 1)
                else:
                    p, q = (i, max(j, b)), (i + 1, max(j, b))
                if (p, q) in gam_edges:
                    continue
            seen[b, a] = True
            stack.append((a, b))
    return True
