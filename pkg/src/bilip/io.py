"""JSON documents: schema dispatch, validation with JSON paths, deterministic dumps."""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Callable, Dict, Union

import numpy as np

from .errors import InputError
from .pamap import Mesh2, PAMap

SCHEMAS = ("pamap.v1", "domain.v1", "grid.v1", "bdata.v1", "ym.v1", "regions.v1", "edgemap.v1")


def _num_array(d: dict, key: str, shape_tail: tuple, dtype, where: str) -> np.ndarray:
    if key not in d:
        raise InputError(f"{where}: missing key $.{key}")
    try:
        a = np.asarray(d[key], dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{where}: $.{key} is not a numeric array ({exc})") from exc
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        if a.size == 0 and len(shape_tail):
            a = a.reshape((0,) + shape_tail)
        else:
            raise InputError(f"{where}: $.{key} must have shape (n, {', '.join(map(str, shape_tail))}), "
                             f"got {a.shape}")
    if dtype is float and not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.isfinite(a))[0].tolist()
        raise InputError(f"{where}: $.{key}{''.join(f'[{i}]' for i in bad)} is not finite")
    return a


def pamap_to_json(m: PAMap) -> dict:
    return {
        "schema": "pamap.v1",
        "vertices": m.mesh.vertices.tolist(),
        "cells": m.mesh.cells.tolist(),
        "boundary": m.mesh.boundary_vertices.tolist(),
        "images": m.images.tolist(),
    }


def pamap_from_json(d: dict, where: str = "<pamap>") -> PAMap:
    _expect(d, "pamap.v1", where)
    V = _num_array(d, "vertices", (2,), float, where)
    C = _num_array(d, "cells", (3,), np.int64, where)
    Y = _num_array(d, "images", (2,), float, where)
    if len(C) and (C.min() < 0 or C.max() >= len(V)):
        k = int(np.argwhere((C < 0) | (C >= len(V)))[0][0])
        raise InputError(f"{where}: $.cells[{k}] references a missing vertex")
    if len(Y) != len(V):
        raise InputError(f"{where}: $.images has {len(Y)} rows for {len(V)} vertices")
    try:
        mesh = Mesh2(V, C)
    except InputError as exc:
        raise InputError(f"{where}: {exc}") from exc
    if "boundary" in d:
        b = np.asarray(d["boundary"], np.int64).ravel()
        if set(b.tolist()) != set(mesh.boundary_vertices.tolist()):
            raise InputError(f"{where}: $.boundary does not match the boundary of the mesh")
    return PAMap(mesh, Y)


def _expect(d: Any, schema: str, where: str) -> None:
    if not isinstance(d, dict):
        raise InputError(f"{where}: $ must be a JSON object")
    if d.get("schema") != schema:
        raise InputError(f"{where}: $.schema must be {schema!r}, got {d.get('schema')!r}")


def sanitize(obj):
    """JSON-ready copy: numpy scalars and arrays unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return sanitize(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(sanitize(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: Union[str, Path], obj) -> None:
    Path(path).write_text(dumps(obj))


def read_json(path: Union[str, Path]) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _loaders() -> Dict[str, Callable]:
    from .cutoff import EdgeMap  # noqa: F401  (edgemap.v1 is write-only)
    from .extension import BoundaryData
    from .tiling import Domain2, GridComplex
    from .ym import EmpiricalYoungMeasure, regions_from_json

    return {
        "pamap.v1": pamap_from_json,
        "domain.v1": lambda d, where: Domain2.from_json(d),
        "grid.v1": lambda d, where: GridComplex.from_json(d),
        "bdata.v1": lambda d, where: BoundaryData.from_json(d),
        "ym.v1": lambda d, where: EmpiricalYoungMeasure.from_json(d),
        "regions.v1": lambda d, where: regions_from_json(d),
    }


def load(path: Union[str, Path], expect: Union[str, tuple, None] = None):
    """(schema, object) for a JSON document; ``expect`` restricts the schema."""
    d = read_json(path)
    if not isinstance(d, dict) or "schema" not in d:
        raise InputError(f"{path}: $.schema is missing")
    schema = d["schema"]
    allowed = (expect,) if isinstance(expect, str) else expect
    if allowed is not None and schema not in allowed:
        raise InputError(f"{path}: $.schema is {schema!r}, expected one of {list(allowed)}")
    loaders = _loaders()
    if schema not in loaders:
        raise InputError(f"{path}: unknown schema {schema!r}")
    try:
        return schema, loaders[schema](d, str(path))
    except InputError as exc:
        msg = str(exc)
        raise InputError(msg if msg.startswith(str(path)) else f"{path}: {msg}") from exc


def to_json(obj) -> dict:
    if isinstance(obj, PAMap):
        return pamap_to_json(obj)
    if hasattr(obj, "to_json"):
        return obj.to_json()
    raise InputError(f"no JSON schema for {type(obj).__name__}")
