"""Mesh constructors and the assembler that glues independently built pieces
into one conforming map."""
from __future__ import annotations

from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import InputError, NumericalError
from .pamap import Mesh2, PAMap


def tensor_mesh(xs: Sequence[float], ys: Sequence[float],
                flip: Optional[np.ndarray] = None) -> Mesh2:
    """Triangulated tensor grid. Each quad is split along its lower-left to
    upper-right diagonal unless ``flip[j, i]`` asks for the other one."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    nx, ny = len(xs) - 1, len(ys) - 1
    if nx < 1 or ny < 1:
        raise InputError("tensor mesh needs at least one cell per direction")
    X, Y = np.meshgrid(xs, ys)
    V = np.column_stack([X.ravel(), Y.ravel()])
    j, i = np.mgrid[0:ny, 0:nx]
    a = (j * (nx + 1) + i).ravel()
    b, c, d = a + 1, a + nx + 2, a + nx + 1
    f = np.zeros(nx * ny, bool) if flip is None else np.asarray(flip, bool).ravel()
    t1 = np.where(f[:, None], np.column_stack([a, b, d]), np.column_stack([a, b, c]))
    t2 = np.where(f[:, None], np.column_stack([b, c, d]), np.column_stack([a, c, d]))
    C = np.empty((2 * nx * ny, 3), np.int64)
    C[0::2], C[1::2] = t1, t2
    return Mesh2(V, C)


def grid_mesh(x0: float, y0: float, x1: float, y1: float, nx: int, ny: Optional[int] = None) -> Mesh2:
    ny = nx if ny is None else ny
    return tensor_mesh(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))


def lattice_mesh(mask: np.ndarray, origin, h: float, sub: int = 1) -> Mesh2:
    """Mesh of a union of lattice squares.

    ``mask[j, i]`` selects the square [x0 + i h, x0 + (i+1) h] x [...]; each
    selected square is split into sub x sub quads and then into triangles.
    """
    mask = np.asarray(mask, bool)
    jj, ii = np.nonzero(mask)
    if not len(ii):
        raise InputError("empty lattice mask")
    q = np.arange(sub)
    qj, qi = np.meshgrid(q, q, indexing="ij")
    I = (ii[:, None] * sub + qi.ravel()[None, :]).ravel()
    J = (jj[:, None] * sub + qj.ravel()[None, :]).ravel()
    corners = np.stack([np.column_stack([I, J]), np.column_stack([I + 1, J]),
                        np.column_stack([I + 1, J + 1]), np.column_stack([I, J + 1])], axis=1)
    keys, inv = np.unique(corners.reshape(-1, 2), axis=0, return_inverse=True)
    inv = inv.reshape(-1, 4)
    C = np.concatenate([inv[:, [0, 1, 2]], inv[:, [0, 2, 3]]])
    hs = h / sub
    V = np.asarray(origin, float) + keys * hs
    return Mesh2(V, C)


def assemble(pieces: Iterable[Tuple[np.ndarray, np.ndarray, np.ndarray]],
             tol: float, img_tol: float = 1e-9) -> PAMap:
    """Glue (vertices, images, cells) pieces into one conforming PAMap.

    Vertices closer than ``tol`` are merged (the first occurrence wins, so
    earlier pieces have priority for exact values). Vertices hanging in the
    interior of a free cell edge are resolved by fanning that cell from its
    centroid; the fan keeps the affine piece, so gradients are unchanged.
    Values must agree within ``img_tol`` (relative to the image scale).
    """
    Vs, Ys, Cs = [], [], []
    off = 0
    for V, Y, C in pieces:
        V = np.asarray(V, float)
        Vs.append(V)
        Ys.append(np.asarray(Y, float))
        Cs.append(np.asarray(C, np.int64) + off)
        off += len(V)
    V = np.concatenate(Vs)
    Y = np.concatenate(Ys)
    C = np.concatenate(Cs)
    scale = max(1.0, float(np.abs(Y).max()))

    pairs = cKDTree(V).query_pairs(tol, output_type="ndarray")
    if len(pairs):
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(V), len(V)))
        _, lab = connected_components(g, directed=False)
        # representative: smallest index in each component
        rep = np.full(lab.max() + 1, len(V))
        np.minimum.at(rep, lab, np.arange(len(V)))
        rmap = rep[lab]
        err = np.abs(Y - Y[rmap]).max()
        if err > img_tol * scale:
            bad = int(np.argmax(np.abs(Y - Y[rmap]).max(axis=1)))
            raise NumericalError(f"pieces disagree by {err:.3e} at shared vertex {V[bad].tolist()}")
        C = rmap[C]
    used = np.unique(C)
    newid = np.full(len(V), -1, np.int64)
    newid[used] = np.arange(len(used))
    V, Y, C = V[used], Y[used], newid[C]
    V, Y, C = _resolve_hanging(V, Y, C, tol, img_tol * scale)
    return PAMap(Mesh2(V, C), Y)


def _resolve_hanging(V, Y, C, tol, img_tol):
    e = np.stack([C[:, [0, 1]], C[:, [1, 2]], C[:, [2, 0]]], axis=1)  # (M, 3, 2)
    flat = np.sort(e.reshape(-1, 2), axis=1)
    _, inv, cnt = np.unique(flat, axis=0, return_inverse=True, return_counts=True)
    free = np.nonzero(cnt[inv.ravel()] == 1)[0]
    if not len(free):
        return V, Y, C
    fe = e.reshape(-1, 2)[free]
    P, Q = V[fe[:, 0]], V[fe[:, 1]]
    mid = 0.5 * (P + Q)
    half = 0.5 * np.linalg.norm(Q - P, axis=1)
    # only vertices on free edges can hang
    fv = np.unique(fe)
    tree = cKDTree(V[fv])
    hits = tree.query_ball_point(mid, half + tol)
    extra = {}
    for k, h in enumerate(hits):
        if len(h) <= 2:
            continue
        cand = fv[np.asarray(h)]
        a, b = fe[k]
        cand = cand[(cand != a) & (cand != b)]
        if not len(cand):
            continue
        d = Q[k] - P[k]
        L2 = float(d @ d)
        w = V[cand] - P[k]
        t = (w @ d) / L2
        dist = np.abs(w[:, 0] * d[1] - w[:, 1] * d[0]) / np.sqrt(L2)
        sel = (dist <= tol) & (t > tol / np.sqrt(L2)) & (t < 1 - tol / np.sqrt(L2))
        if not sel.any():
            continue
        cand, t = cand[sel], t[sel]
        o = np.argsort(t)
        cand, t = cand[o], t[o]
        lin = Y[a] + t[:, None] * (Y[b] - Y[a])
        if np.abs(Y[cand] - lin).max() > img_tol:
            raise NumericalError(f"hanging vertex at {V[cand[np.argmax(np.abs(Y[cand] - lin).max(axis=1))]].tolist()} on edge {V[a].tolist()}-{V[b].tolist()}: value does not match the affine edge; "
                                 f"mismatch {np.abs(Y[cand] - lin).max():.3e}")
        cell, loc = divmod(int(free[k]), 3)
        extra[(cell, loc)] = cand
    if not extra:
        return V, Y, C
    cells_hit = sorted({c for c, _ in extra})
    newV, newY, newC = [V], [Y], []
    keep = np.ones(len(C), bool)
    nid = len(V)
    for c in cells_hit:
        keep[c] = False
        ring = []
        for loc in range(3):
            ring.append(C[c, loc])
            ring.extend(extra.get((c, loc), []))
        cen = V[C[c]].mean(axis=0)
        newV.append(cen[None])
        newY.append(Y[C[c]].mean(axis=0)[None])
        for k in range(len(ring)):
            newC.append([nid, ring[k], ring[(k + 1) % len(ring)]])
        nid += 1
    V = np.concatenate(newV)
    Y = np.concatenate(newY)
    C = np.concatenate([C[keep], np.asarray(newC, np.int64)])
    return V, Y, C
