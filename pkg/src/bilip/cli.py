"""Command-line interface.

Every subcommand writes a JSON report (``--report``, default report.json)
with a provenance block. Exit codes: 0 ok, 2 input error, 3 numerical or
certification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import io as bio
from .errors import InputError, NumericalError

INPUT_KEYS = ("file", "domain", "ytilde", "y", "grid", "boundary", "seq", "regions", "energy", "u0")
OUTPUT_KEYS = ("output", "report", "svg", "trace")
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


@dataclass
class PipelineConfig:
    command: str
    inputs: Dict[str, object] = field(default_factory=dict)
    outputs: Dict[str, Optional[str]] = field(default_factory=dict)
    params: Dict[str, object] = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"command": self.command, "inputs": self.inputs, "outputs": self.outputs,
                "params": self.params, "seed": self.seed}

    def input_paths(self) -> List[str]:
        out = []
        for v in self.inputs.values():
            out.extend(v if isinstance(v, list) else [v])
        return [p for p in out if p is not None]

    def config_hash(self) -> str:
        h = hashlib.sha256(bio.dumps(self.to_dict()).encode())
        for p in self.input_paths():
            if Path(p).is_file():
                h.update(bio.file_digest(p).encode())
        return h.hexdigest()

    @classmethod
    def from_namespace(cls, ns: argparse.Namespace) -> "PipelineConfig":
        d = {k: v for k, v in vars(ns).items() if k not in ("func",)}
        cmd = d.pop("command")
        seed = d.pop("seed", 0)
        inputs = {k: d.pop(k) for k in INPUT_KEYS if k in d}
        outputs = {k: d.pop(k) for k in OUTPUT_KEYS if k in d}
        return cls(cmd, inputs, outputs, d, seed)


def versions() -> dict:
    import matplotlib
    import scipy
    import shapely

    return {"bilip": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "shapely": shapely.__version__, "matplotlib": matplotlib.__version__}


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("BILIP_JOBS", "1")))
    except ValueError:
        return 1


def _parse_matrix(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.replace(";", ",").split(",")]
    except ValueError as exc:
        raise InputError(f"--A expects four comma-separated numbers, got {text!r}") from exc
    if len(vals) != 4:
        raise InputError(f"--A expects four comma-separated numbers, got {len(vals)}")
    return np.array(vals).reshape(2, 2)


# subcommands; each returns the result block of the report

def cmd_tile(cfg: PipelineConfig) -> dict:
    from . import render
    from .cutoff import tiling_for_budget
    from .tiling import BOUND, GAMMA, STRIP, build_tiling, separation_check

    _, dom = bio.load(cfg.inputs["domain"], "domain.v1")
    p = cfg.params
    if p.get("strip_width") is not None:
        grid = build_tiling(dom, p["strip_width"])
    else:
        grid = tiling_for_budget(dom, p["delta"])
    bio.write_json(cfg.outputs["output"], grid.to_json())
    if cfg.outputs.get("svg"):
        render.render_grid(grid, cfg.outputs["svg"])
    areas = grid.partition_areas()
    return {"r": grid.r, "strip_width": grid.delta, "n_strip_squares": int(len(grid.strip_squares)),
            "n_gamma_edges": int(sum(l == GAMMA for l in grid.labels)),
            "partition_areas": areas, "modifiable_fraction": (areas[STRIP] + areas[BOUND]) / dom.area,
            "separation": separation_check(grid)}


def cmd_check(cfg: PipelineConfig) -> dict:
    from .pamap import bilip_constant, injectivity_report

    _, m = bio.load(cfg.inputs["file"], "pamap.v1")
    rep = injectivity_report(m)
    res = {"certification": rep, "n_cells": m.mesh.n_cells, "n_vertices": m.mesh.n_vertices}
    if rep["orientation_preserving"]:
        Lc, Ls = bilip_constant(m, cfg.params["pairs"], cfg.seed)
        res.update(L=Lc, L_cell=Lc, L_sampled=Ls)
    if not rep["injective"]:
        raise _Failure("map is not certified injective", res)
    return res


def cmd_cutoff(cfg: PipelineConfig) -> dict:
    from . import render
    from .cutoff import cutoff, domain_from_mesh, tiling_for_budget

    _, yt = bio.load(cfg.inputs["ytilde"], "pamap.v1")
    _, y = bio.load(cfg.inputs["y"], "pamap.v1")
    p = cfg.params
    if cfg.inputs.get("grid"):
        _, grid = bio.load(cfg.inputs["grid"], "grid.v1")
    elif p.get("delta") is not None:
        grid = tiling_for_budget(domain_from_mesh(y.mesh), p["delta"])
    else:
        raise InputError("cutoff needs --grid or --delta")
    res = cutoff(yt, y, grid, p["L"], p["n"], p["jobs"], p["budget"], p["pairs"], cfg.seed)
    bio.write_json(cfg.outputs["output"], bio.pamap_to_json(res.u))
    if cfg.outputs.get("svg"):
        render.render_crosses(grid, res.crosses, cfg.outputs["svg"])
    return res.report()


def cmd_extend(cfg: PipelineConfig) -> dict:
    from . import extension, render

    _, bd = bio.load(cfg.inputs["boundary"], "bdata.v1")
    m, L = extension.extend_square(bd, cfg.params["n"], cfg.params["budget"])
    bio.write_json(cfg.outputs["output"], bio.pamap_to_json(m))
    if cfg.outputs.get("svg"):
        render.render_map(m, cfg.outputs["svg"])
    return {"measured_L": L, "n_cells": m.mesh.n_cells,
            "theoretical_bound": extension.theoretical_bound(bd.L) if np.isfinite(bd.L) else None,
            "certified": True}


def _regions_from(path: str):
    schema, obj = bio.load(path, ("regions.v1", "grid.v1"))
    if schema == "regions.v1":
        return obj, None
    from .tiling import BOUND, BULK, STRIP

    names, regs = [], []
    for name in (BULK, STRIP, BOUND):
        poly = obj.region_polygon(name)
        if not poly.is_empty:
            names.append(name)
            regs.append(poly)
    return regs, names


def cmd_ym(cfg: PipelineConfig) -> dict:
    from . import render, ym

    seq = [bio.load(p, "pamap.v1")[1] for p in cfg.inputs["seq"]]
    if cfg.inputs.get("regions"):
        regions, names = _regions_from(cfg.inputs["regions"])
    else:
        regions, names = [seq[-1].mesh.polygon()], ["domain"]
    p = cfg.params
    m = ym.empirical_measure(seq, regions, p["tail"], p.get("rho"), p.get("rho") is not None)
    bio.write_json(cfg.outputs["output"], m.to_json())
    if cfg.outputs.get("svg"):
        render.render_regions(m.regions, cfg.outputs["svg"], names)
    mom = ym.first_moment(m)
    return {"regions": names or [f"R{k}" for k in range(m.n_regions)],
            "n_atoms": [len(a[0]) for a in m.atoms], "first_moment": mom.reshape(-1, 4).tolist(),
            "det_pairing": ym.pair_with_test(m, lambda M: np.linalg.det(M)).tolist()}


def cmd_zv(cfg: PipelineConfig) -> dict:
    from . import densities, relax

    v = densities.load(cfg.inputs["energy"])
    p = cfg.params
    A = _parse_matrix(p["A"])
    seeds = tuple(s.strip() for s in p["seeds"].split(",") if s.strip())
    prob = relax.RelaxProblem(v, A, p["n"], seeds, p["budget"], p["jobs"])
    value, argmap, info = relax.zv_estimate(prob, return_info=True)
    if cfg.outputs.get("output") and argmap is not None:
        bio.write_json(cfg.outputs["output"], bio.pamap_to_json(argmap))
    vA = float(v(A[None])[0])
    return {"value": value, "v_A": vA, "ratio": value / vA if np.isfinite(value) and vA > 0 else None,
            "det_A": float(np.linalg.det(A)), "upper_estimate": True, "energy_digest": v.digest(),
            "best": info["seeds"][info["best"]] if info["seeds"] else None, "seeds": info["seeds"]}


def cmd_minimize(cfg: PipelineConfig) -> dict:
    from . import densities, energy

    v = densities.load(cfg.inputs["energy"])
    _, u0 = bio.load(cfg.inputs["u0"], "pamap.v1")
    p = cfg.params
    spec = energy.EnergySpec(v, p["eps"], u0)
    seeds = tuple(s.strip() for s in p["seeds"].split(",") if s.strip())
    i0 = energy.i_eps(spec, u0)
    u, value, trace = energy.minimize(spec, p["budget"], seeds=seeds, n=p["n"])
    bio.write_json(cfg.outputs["output"], bio.pamap_to_json(u))
    if cfg.outputs.get("trace"):
        with open(cfg.outputs["trace"], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "value"])
            for k, t in enumerate(trace):
                w.writerow([k, repr(float(t))])
    return {"value": value, "initial": i0, "steps": len(trace) - 1,
            "monotone": bool(np.all(np.diff(trace) <= 0)), "n_cells": u.mesh.n_cells}


def cmd_render(cfg: PipelineConfig) -> dict:
    from . import render

    schema, obj = bio.load(cfg.inputs["file"])
    out = cfg.outputs.get("output") or str(Path(cfg.inputs["file"]).with_suffix(".svg"))
    render.render_any(schema, obj, out)
    return {"schema": schema, "svg": out, "sha256": bio.file_digest(out)}


class _Failure(NumericalError):
    """Numerical failure that still carries a partial result."""

    def __init__(self, msg: str, result: dict):
        super().__init__(msg)
        self.result = result


COMMANDS: Dict[str, Callable[[PipelineConfig], dict]] = {
    "tile": cmd_tile, "check": cmd_check, "cutoff": cmd_cutoff, "extend": cmd_extend,
    "ym": cmd_ym, "zv": cmd_zv, "minimize": cmd_minimize, "render": cmd_render,
}


def run(cfg: PipelineConfig) -> int:
    """Execute one subcommand; the report is written in every case."""
    report = {"command": cfg.command, "config": cfg.to_dict()}
    code = EXIT_OK
    try:
        report["result"] = COMMANDS[cfg.command](cfg)
        report["status"] = "ok"
    except InputError as exc:
        report.update(status="input_error", error=str(exc))
        code = EXIT_INPUT
    except NumericalError as exc:
        report.update(status="numerical_error", error=str(exc), module=type(exc).__module__.split(".")[-1])
        if isinstance(exc, _Failure):
            report["result"] = exc.result
        code = EXIT_NUMERICAL
    report["provenance"] = {"config_hash": cfg.config_hash(), "versions": versions(),
                            "inputs": {p: bio.file_digest(p) for p in cfg.input_paths() if Path(p).is_file()}}
    if cfg.outputs.get("report"):
        bio.write_json(cfg.outputs["report"], report)
    if code != EXIT_OK:
        print(f"bilip {cfg.command}: {report['error']}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bilip", description="Certified bi-Lipschitz cut-off, "
                                 "relaxation and Young-measure tools.")
    ap.add_argument("--version", action="version", version=f"bilip {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=False, svg=True):
        p.add_argument("--report", default="report.json", help="JSON report path (default report.json)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=int, default=_default_jobs(),
                       help="parallel workers (default $BILIP_JOBS or 1)")
        if out_required is not None:
            p.add_argument("-o", "--output", required=out_required)
        if svg:
            p.add_argument("--svg", help="also write an SVG picture")

    p = sub.add_parser("tile", help="tile the boundary strip of a domain")
    p.add_argument("--domain", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--delta", type=float, help="area budget: strip plus collar <= delta |Omega|")
    g.add_argument("--strip-width", type=float, help="strip width passed to the tiler")
    common(p, True)

    p = sub.add_parser("check", help="certify a pamap.v1 map and measure its constant")
    p.add_argument("file")
    p.add_argument("--pairs", type=int, default=100_000)
    common(p, None, svg=False)

    p = sub.add_parser("cutoff", help="glue y near the boundary to ytilde in the bulk")
    p.add_argument("--ytilde", required=True)
    p.add_argument("--y", required=True)
    p.add_argument("--grid")
    p.add_argument("--delta", type=float, help="area budget when no grid is given")
    p.add_argument("--L", type=float, required=True)
    p.add_argument("-n", "--n", type=int, default=16)
    p.add_argument("--budget", type=int, default=10_000)
    p.add_argument("--pairs", type=int, default=100_000)
    common(p, True)

    p = sub.add_parser("extend", help="extend boundary data of a square")
    p.add_argument("--boundary", required=True)
    p.add_argument("-n", "--n", type=int, default=16)
    p.add_argument("--budget", type=int, default=10_000)
    common(p, True)

    p = sub.add_parser("ym", help="empirical Young measure of a sequence")
    p.add_argument("--seq", nargs="+", required=True)
    p.add_argument("--regions")
    p.add_argument("--tail", type=int, default=1)
    p.add_argument("--rho", type=float)
    common(p, True)

    p = sub.add_parser("zv", help="upper estimate of the piecewise-affine relaxation")
    p.add_argument("--energy", required=True)
    p.add_argument("--A", required=True, help='"a11,a12,a21,a22"')
    p.add_argument("-n", "--n", type=int, default=16)
    p.add_argument("--seeds", default="affine,laminate")
    p.add_argument("--budget", type=int, default=200)
    common(p, False, svg=False)

    p = sub.add_parser("minimize", help="minimise the regularised energy")
    p.add_argument("--energy", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--u0", required=True)
    p.add_argument("--trace")
    p.add_argument("--seeds", default="u0", help="u0 and/or laminate")
    p.add_argument("-n", "--n", type=int, default=16)
    p.add_argument("--budget", type=int, default=200)
    common(p, True, svg=False)

    p = sub.add_parser("render", help="render a JSON document to SVG")
    p.add_argument("file")
    common(p, False, svg=False)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    cfg = PipelineConfig.from_namespace(ns)
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
