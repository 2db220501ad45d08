import json
import subprocess
import sys

import numpy as np
import pytest

from bilip import cli, corpus, io as bio, laminates, meshes, pamap, render
from bilip.extension import BoundaryData
from bilip.tiling import Domain2, build_tiling

UNIT = [[0, 0], [1, 0], [1, 1], [0, 1]]


def _run(*argv):
    return cli.main([str(a) for a in argv])


def _report(path):
    return json.loads(path.read_text())


@pytest.fixture()
def files(tmp_path):
    mesh = meshes.grid_mesh(0, 0, 1, 1, 8)
    ident = tmp_path / "identity.json"
    bio.write_json(ident, bio.pamap_to_json(pamap.identity_map(mesh)))
    dom = tmp_path / "unit.json"
    bio.write_json(dom, Domain2(np.array(UNIT, float)).to_json())
    energy = tmp_path / "w.toml"
    energy.write_text('[energy]\nkind = "multiwell"\nwells = [[1.2, 0, 0, 1], [0.8, 0, 0, 1]]\n')
    return {"identity": ident, "domain": dom, "energy": energy, "dir": tmp_path}


def test_check_identity(files):
    rep = files["dir"] / "r.json"
    assert _run("check", files["identity"], "--report", rep, "--pairs", 2000) == 0
    d = _report(rep)
    assert d["status"] == "ok" and d["result"]["L"] == 1.0
    assert set(d["provenance"]) == {"config_hash", "versions", "inputs"}
    assert d["provenance"]["versions"]["bilip"]


def test_check_folded_map_exits_3(files, tmp_path):
    mesh = meshes.grid_mesh(0, 0, 1, 1, 2)
    Y = mesh.vertices.copy()
    Y[mesh.interior_vertices[0]] = [1.5, 1.5]
    bad = tmp_path / "bad.json"
    bio.write_json(bad, bio.pamap_to_json(pamap.PAMap(mesh, Y)))
    rep = tmp_path / "r.json"
    assert _run("check", bad, "--report", rep) == 3
    assert _report(rep)["status"] == "numerical_error"


@pytest.mark.parametrize("doc,needle", [
    ({"schema": "pamap.v1", "vertices": [[0, 0], [1, 0], [0, 1]], "cells": [[0, 1, 5]], "images": [[0, 0], [1, 0], [0, 1]]},
     "$.cells[0]"),
    ({"schema": "pamap.v1", "vertices": [[0, 0], [1, 0]], "cells": [[0, 1, 1]]}, "$.images"),
    ({"schema": "pamap.v1", "vertices": [[0, 0], [1, 0], [0, "x"]], "cells": [[0, 1, 2]], "images": [[0, 0], [1, 0], [0, 1]]},
     "$.vertices"),
    ({"schema": "domain.v1"}, "domain.v1"),
    ({"vertices": []}, "$.schema"),
])
def test_schema_errors_exit_2(tmp_path, doc, needle):
    p = tmp_path / "in.json"
    p.write_text(json.dumps(doc))
    rep = tmp_path / "r.json"
    assert _run("check", p, "--report", rep) == 2
    d = _report(rep)
    assert d["status"] == "input_error" and needle in d["error"] and str(p) in d["error"]


def test_missing_and_malformed_files(tmp_path):
    rep = tmp_path / "r.json"
    assert _run("check", tmp_path / "nope.json", "--report", rep) == 2
    (tmp_path / "x.json").write_text("{bad")
    assert _run("check", tmp_path / "x.json", "--report", rep) == 2
    assert "line 1" in _report(rep)["error"]


def test_tile_and_render(files):
    d = files["dir"]
    assert _run("tile", "--domain", files["domain"], "--strip-width", 0.25, "-o", d / "g.json",
                "--svg", d / "g.svg", "--report", d / "r.json") == 0
    res = _report(d / "r.json")["result"]
    assert res["r"] == 1 / 16 and res["n_gamma_edges"] == 48 and res["separation"]
    svg = (d / "g.svg").read_text()
    assert svg.startswith("<?xml") and "#c0392b" in svg
    assert _run("render", d / "g.json", "-o", d / "g2.svg", "--report", d / "r2.json") == 0
    assert (d / "g2.svg").read_bytes() == (d / "g.svg").read_bytes()


def test_cutoff_identity_pair(files):
    d = files["dir"]
    grid = build_tiling(Domain2(np.array(UNIT, float)), 0.25)
    m = pamap.identity_map(corpus.grid_mesh_for(grid))
    bio.write_json(d / "id.json", bio.pamap_to_json(m))
    bio.write_json(d / "grid.json", grid.to_json())
    code = _run("cutoff", "--ytilde", d / "id.json", "--y", d / "id.json", "--grid", d / "grid.json",
                "--L", 1, "-n", 4, "--pairs", 5000, "-o", d / "u.json", "--report", d / "r.json")
    assert code == 0
    res = _report(d / "r.json")["result"]
    assert res["grid_bilip"]["measured"] == pytest.approx(1.0, abs=1e-8)
    assert res["trace_exact"] and res["injective"]


def test_extend_affine(files):
    d = files["dir"]
    A = np.array([[1.2, 0.3], [0.0, 0.9]])
    p = np.arange(64) / 16.0
    X = BoundaryData(np.zeros(2), 1.0, p, np.zeros((64, 2))).positions()
    bio.write_json(d / "b.json", BoundaryData(np.zeros(2), 1.0, p, X @ A.T).to_json())
    assert _run("extend", "--boundary", d / "b.json", "-n", 8, "-o", d / "e.json",
                "--svg", d / "e.svg", "--report", d / "r.json") == 0
    s = np.linalg.svd(A, compute_uv=False)
    assert _report(d / "r.json")["result"]["measured_L"] == pytest.approx(max(s[0], 1 / s[1]), rel=1e-9)


def test_ym_and_zv_and_minimize(files):
    d = files["dir"]
    lam = laminates.laminate_from_wells(np.diag([1.2, 1.0]), np.diag([0.8, 1.0]), 0.5, 8)
    bio.write_json(d / "lam.json", bio.pamap_to_json(lam))
    assert _run("ym", "--seq", d / "lam.json", "-o", d / "m.json", "--report", d / "r.json") == 0
    res = _report(d / "r.json")["result"]
    assert res["n_atoms"] == [4]
    assert np.allclose(res["first_moment"], [[1, 0, 0, 1]], atol=1e-12)
    _, m = bio.load(d / "m.json", "ym.v1")
    assert m.n_regions == 1

    assert _run("zv", "--energy", files["energy"], "--A", "1,0,0,1", "-n", 4, "--budget", 10,
                "--report", d / "z.json") == 0
    z = _report(d / "z.json")["result"]
    assert z["value"] < 0.1 * z["v_A"] and z["upper_estimate"]
    assert _run("zv", "--energy", files["energy"], "--A", "1,0,0,-1", "--report", d / "z.json") == 0
    assert _report(d / "z.json")["result"]["value"] == "inf"
    assert _run("zv", "--energy", files["energy"], "--A", "1,0,0", "--report", d / "z.json") == 2

    u0 = d / "u0.json"
    bio.write_json(u0, bio.pamap_to_json(pamap.affine_map(meshes.grid_mesh(0, 0, 1, 1, 4), np.eye(2))))
    assert _run("minimize", "--energy", files["energy"], "--eps", 0.01, "--u0", u0, "--budget", 20,
                "-o", d / "us.json", "--trace", d / "t.csv", "--report", d / "mr.json") == 0
    mr = _report(d / "mr.json")["result"]
    assert mr["monotone"] and mr["value"] <= mr["initial"]
    rows = (d / "t.csv").read_text().splitlines()
    assert rows[0] == "step,value" and len(rows) == mr["steps"] + 2


def test_bad_energy_file(files):
    d = files["dir"]
    (d / "bad.toml").write_text('[energy]\nkind = "cubic"\nwells = [[1, 0, 0, 1]]\n')
    assert _run("zv", "--energy", d / "bad.toml", "--A", "1,0,0,1", "--report", d / "r.json") == 2


def test_determinism(files):
    d = files["dir"]
    outs = []
    for _ in range(2):
        assert _run("check", files["identity"], "--pairs", 3000, "--seed", 7, "--report", d / "r.json") == 0
        outs.append((d / "r.json").read_bytes())
    assert outs[0] == outs[1]
    assert _run("check", files["identity"], "--pairs", 3000, "--seed", 8, "--report", d / "r.json") == 0
    assert json.loads(outs[0])["provenance"]["config_hash"] != _report(d / "r.json")["provenance"]["config_hash"]


def test_render_map_is_byte_identical(tmp_path):
    m = laminates.laminate_from_wells(np.diag([1.2, 1.0]), np.diag([0.8, 1.0]), 0.5, 4)
    render.render_map(m, tmp_path / "a.svg")
    render.render_map(m, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_identity_renders_one_colour(tmp_path):
    render.render_map(pamap.identity_map(meshes.grid_mesh(0, 0, 1, 1, 4)), tmp_path / "i.svg")
    svg = (tmp_path / "i.svg").read_text()
    import re
    fills = set(re.findall(r'clip-path="url\(#[^)]*\)" style="fill: (#[0-9a-f]{6})', svg))
    assert len(fills) == 1


def test_render_unknown_schema(tmp_path):
    p = tmp_path / "e.json"
    p.write_text(json.dumps({"schema": "edgemap.v1"}))
    assert _run("render", p, "--report", tmp_path / "r.json") == 2


def test_sanitize_and_dumps():
    s = bio.dumps({"b": np.float64(np.inf), "a": np.arange(2), "c": (np.bool_(True), np.nan)})
    assert json.loads(s) == {"a": [0, 1], "b": "inf", "c": [True, "nan"]}
    assert s.index('"a"') < s.index('"b"')


def test_module_entry_point(files):
    r = subprocess.run([sys.executable, "-m", "bilip", "check", str(files["identity"]), "--pairs", "500",
                        "--report", str(files["dir"] / "r.json")], capture_output=True, text=True)
    assert r.returncode == 0
