"""Deterministic SVG pictures of grids, crosses, regions and deformed meshes."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection, PolyCollection  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402

from .errors import InputError  # noqa: E402
from .pamap import PAMap  # noqa: E402
from .tiling import BOUND, BULK, GAMMA, INNER, OUTER, STRIP, GridComplex  # noqa: E402

LAYER_FILL = {BULK: "#eef2f7", STRIP: "#fde9c8", BOUND: "#d8ecd6"}
EDGE_STYLE = {INNER: ("#7f8c9d", 0.5), OUTER: ("#7f8c9d", 0.5), GAMMA: ("#c0392b", 2.0)}
STYLE = {
    "svg.hashsalt": "bilip",
    "svg.fonttype": "none",
    "font.size": 8,
    "axes.linewidth": 0.6,
}


@contextmanager
def _figure(size=(5.0, 5.0)):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size)
        ax.set_aspect("equal")
        try:
            yield fig, ax
        finally:
            plt.close(fig)


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None}, bbox_inches="tight")


def _grid_layers(ax, grid: GridComplex) -> None:
    part = grid.partition
    polys, colors = [], []
    for (j, i), p in np.ndenumerate(part):
        if p in LAYER_FILL:
            x0, y0 = grid.origin + grid.r * np.array([i, j])
            polys.append([(x0, y0), (x0 + grid.r, y0), (x0 + grid.r, y0 + grid.r), (x0, y0 + grid.r)])
            colors.append(LAYER_FILL[p])
    ax.add_collection(PolyCollection(polys, facecolors=colors, edgecolors="none"))


def _grid_edges(ax, grid: GridComplex, gamma_only: bool = False) -> None:
    V = grid.vertices
    for lab in (INNER, OUTER, GAMMA):
        if gamma_only and lab != GAMMA:
            continue
        sel = np.array([l == lab for l in grid.labels], bool)
        if not sel.any():
            continue
        col, lw = EDGE_STYLE[lab]
        segs = V[grid.edges[sel]]
        ax.add_collection(LineCollection(segs, colors=col, linewidths=lw, label=lab))


def _domain_outline(ax, poly) -> None:
    polys = list(poly.geoms) if hasattr(poly, "geoms") else [poly]
    for p in polys:
        for ring in [p.exterior, *p.interiors]:
            P = np.asarray(ring.coords)
            ax.plot(P[:, 0], P[:, 1], color="#2c3e50", lw=1.0)


def render_grid(grid: GridComplex, path, title: Optional[str] = None) -> None:
    """Partition classes shaded, Gamma edges in a thick red stroke."""
    with _figure() as (fig, ax):
        _grid_layers(ax, grid)
        _grid_edges(ax, grid)
        _domain_outline(ax, grid.domain.polygon)
        ax.autoscale_view()
        ax.legend(loc="upper right", fontsize=6)
        ax.set_title(title or f"r = {grid.r:g}, {len(grid.strip_squares)} strip squares")
        _save(fig, path)


def render_crosses(grid: GridComplex, crosses: Sequence, path, window=None) -> None:
    """Crosses drawn as the four arms w -> w + xi_i (neighbour_i - w)."""
    with _figure() as (fig, ax):
        _grid_layers(ax, grid)
        _grid_edges(ax, grid)
        arms, pivots = [], []
        for c in crosses:
            for p in c.extremals:
                arms.append([c.w, p])
                pivots.append(p)
        if arms:
            ax.add_collection(LineCollection(arms, colors="#1f4e9c", linewidths=1.6))
            P = np.asarray(pivots)
            ax.plot(P[:, 0], P[:, 1], ".", color="#1f4e9c", ms=2.5)
        if window is not None:
            ax.set_xlim(window[0], window[2])
            ax.set_ylim(window[1], window[3])
        else:
            ax.autoscale_view()
        ax.set_title(f"{len(crosses)} crosses")
        _save(fig, path)


def det_norm(dets: np.ndarray) -> Normalize:
    lo, hi = float(dets.min()), float(dets.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        lo, hi = lo - 0.5, hi + 0.5
    return Normalize(lo, hi)


def render_map(m: PAMap, path, deformed: bool = True, cmap: str = "viridis") -> None:
    """Cells of the (deformed) mesh coloured by det of the gradient."""
    dets = m.dets
    P = (m.images if deformed else m.mesh.vertices)[m.mesh.cells]
    with _figure() as (fig, ax):
        norm = det_norm(dets)
        edges = "#00000033" if m.mesh.n_cells <= 5000 else "none"
        coll = PolyCollection(P, array=dets, cmap=cmap, norm=norm, edgecolors=edges, linewidths=0.2)
        ax.add_collection(coll)
        ax.autoscale_view()
        fig.colorbar(coll, ax=ax, shrink=0.7, label="det")
        ax.set_title(f"{m.mesh.n_cells} cells, det in [{dets.min():.4g}, {dets.max():.4g}]")
        _save(fig, path)


def render_regions(regions: Sequence, path, labels: Optional[Sequence[str]] = None) -> None:
    cmap = plt.get_cmap("tab10")
    with _figure() as (fig, ax):
        for k, r in enumerate(regions):
            polys = list(r.geoms) if hasattr(r, "geoms") else [r]
            for p in polys:
                P = np.asarray(p.exterior.coords)
                ax.fill(P[:, 0], P[:, 1], color=cmap(k % 10), alpha=0.35, lw=0)
            _domain_outline(ax, r)
            c = r.representative_point()
            ax.text(c.x, c.y, labels[k] if labels else f"R{k}", ha="center", va="center")
        ax.autoscale_view()
        _save(fig, path)


def render_boundary(bd, path) -> None:
    P = np.vstack([bd.images, bd.images[:1]])
    X = bd.positions()
    X = np.vstack([X, X[:1]])
    with _figure() as (fig, ax):
        ax.plot(X[:, 0], X[:, 1], color="#7f8c9d", lw=0.8, label="square")
        ax.plot(P[:, 0], P[:, 1], color="#c0392b", lw=1.2, label="image")
        ax.legend(loc="upper right", fontsize=6)
        _save(fig, path)


def render_any(schema: str, obj, path) -> None:
    if schema == "pamap.v1":
        render_map(obj, path)
    elif schema == "grid.v1":
        render_grid(obj, path)
    elif schema == "domain.v1":
        render_regions([obj.polygon], path, ["domain"])
    elif schema == "regions.v1":
        render_regions(obj, path)
    elif schema == "ym.v1":
        render_regions(obj.regions, path, [f"R{k}: {len(a[0])} atoms" for k, a in enumerate(obj.atoms)])
    elif schema == "bdata.v1":
        render_boundary(obj, path)
    else:
        raise InputError(f"cannot render schema {schema!r}")
