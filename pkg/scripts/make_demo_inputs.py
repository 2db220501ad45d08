"""Write the laminate demo inputs into a directory (default ./demo)."""
import sys
from pathlib import Path

import numpy as np

from bilip import corpus, io as bio, laminates, meshes, pamap
from bilip.extension import BoundaryData
from bilip.tiling import Domain2, build_tiling

A1, A2 = np.diag([1.2, 1.0]), np.diag([0.8, 1.0])


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dom = Domain2(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float))
    bio.write_json(out / "unit.json", dom.to_json())
    grid = build_tiling(dom, 0.25)
    mesh = corpus.grid_mesh_for(grid)
    yt, y = corpus.random_close_pair(np.random.default_rng(0), mesh, grid.r, 2.0)
    bio.write_json(out / "ytilde.json", bio.pamap_to_json(yt))
    bio.write_json(out / "y.json", bio.pamap_to_json(y))
    for k in (4, 16, 64):
        bio.write_json(out / f"lam{k}.json", bio.pamap_to_json(laminates.laminate_from_wells(A1, A2, 0.5, k)))
    bio.write_json(out / "u0.json", bio.pamap_to_json(pamap.affine_map(meshes.grid_mesh(0, 0, 1, 1, 8), np.eye(2))))
    p = np.arange(64) / 16.0
    X = BoundaryData(np.zeros(2), 1.0, p, np.zeros((64, 2))).positions()
    th = 0.4 * np.sin(np.pi * X[:, 0])
    bio.write_json(out / "bdata.json", BoundaryData(np.zeros(2), 1.0, p, X * (1 + 0.2 * th[:, None])).to_json())
    (out / "double_well.toml").write_text(
        '[energy]\nkind = "multiwell"\nwells = [[1.2, 0, 0, 1], [0.8, 0, 0, 1]]\nrho = 4\n')


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo"))
