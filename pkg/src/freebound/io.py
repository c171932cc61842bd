"""File formats: ASCII legacy VTK, nodal CSV, and deterministic JSON."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .field import VectorField
from .mesh import Mesh

VTK_CELL_TYPES = {1: 3, 2: 5, 3: 10}  # line, triangle, tetra


def _fmt(x: float) -> str:
    return repr(float(x))


def _pad3(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    out = np.zeros((arr.shape[0], 3))
    out[:, : min(3, arr.shape[1])] = arr[:, :3]
    return out


def _write_data_block(f, kind: str, count: int, data: Mapping[str, np.ndarray]) -> None:
    if not data:
        return
    f.write(f"{kind} {count}\n")
    for name, values in data.items():
        values = np.asarray(values, dtype=float)
        if values.ndim == 1 or values.shape[1] == 1:
            f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for v in values.reshape(-1):
                f.write(_fmt(v) + "\n")
        elif values.shape[1] <= 3:
            f.write(f"VECTORS {name} double\n")
            for row in _pad3(values):
                f.write(" ".join(_fmt(v) for v in row) + "\n")
        else:
            f.write(f"FIELD {name}_field 1\n{name} {values.shape[1]} {values.shape[0]} double\n")
            for row in values:
                f.write(" ".join(_fmt(v) for v in row) + "\n")


def write_vtk(
    path,
    mesh: Mesh,
    point_data: Mapping[str, np.ndarray] | None = None,
    cell_data: Mapping[str, np.ndarray] | None = None,
    title: str = "freebound mesh",
) -> Path:
    """Write ``mesh`` as an ASCII legacy VTK unstructured grid."""
    path = Path(path)
    k = mesh.n + 1
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write(title[:255] + "\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_nodes} double\n")
        for row in _pad3(mesh.vertices):
            f.write(" ".join(_fmt(v) for v in row) + "\n")
        f.write(f"CELLS {mesh.num_elements} {mesh.num_elements * (k + 1)}\n")
        for s in mesh.simplices:
            f.write(f"{k} " + " ".join(str(int(i)) for i in s) + "\n")
        f.write(f"CELL_TYPES {mesh.num_elements}\n")
        ctype = VTK_CELL_TYPES[mesh.n]
        f.write("".join(f"{ctype}\n" for _ in range(mesh.num_elements)))
        _write_data_block(f, "CELL_DATA", mesh.num_elements, cell_data or {})
        _write_data_block(f, "POINT_DATA", mesh.num_nodes, point_data or {})
    return path


def write_point_set_vtk(path, points: np.ndarray, point_data: Mapping[str, np.ndarray] | None = None, title: str = "points") -> Path:
    """Write bare points (VTK_VERTEX cells), e.g. a flagged singular set."""
    path = Path(path)
    pts = np.atleast_2d(np.asarray(points, dtype=float)) if len(points) else np.zeros((0, 3))
    with path.open("w", encoding="utf-8", newline="\n") as f:
        f.write("# vtk DataFile Version 3.0\n" + title[:255] + "\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {len(pts)} double\n")
        for row in _pad3(pts) if len(pts) else []:
            f.write(" ".join(_fmt(v) for v in row) + "\n")
        f.write(f"CELLS {len(pts)} {2 * len(pts)}\n")
        f.write("".join(f"1 {i}\n" for i in range(len(pts))))
        f.write(f"CELL_TYPES {len(pts)}\n")
        f.write("".join("1\n" for _ in range(len(pts))))
        if len(pts):
            _write_data_block(f, "POINT_DATA", len(pts), point_data or {})
    return path


def read_vtk_points(path) -> np.ndarray:
    """POINTS section of a legacy VTK file (used for round-trip checks)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        if line.startswith("POINTS"):
            count = int(line.split()[1])
            return np.array([[float(v) for v in lines[i + 1 + k].split()] for k in range(count)])
    raise ValueError(f"no POINTS section in {path}")


def write_field_csv(path, u: VectorField) -> Path:
    """Rows ``node_index, x1..xn, u1..uN`` with a header."""
    path = Path(path)
    n, N = u.mesh.n, u.N
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["node_index", *(f"x{k + 1}" for k in range(n)), *(f"u{k + 1}" for k in range(N))])
        for a, (x, v) in enumerate(zip(u.mesh.vertices, u.values)):
            w.writerow([a, *(_fmt(t) for t in x), *(_fmt(t) for t in v)])
    return path


def read_field_csv(path, mesh: Mesh, tol: float = 1e-9) -> VectorField:
    """Read a nodal CSV written by :func:`write_field_csv` onto ``mesh``.

    Node coordinates in the file must match the mesh within ``tol``.
    """
    with Path(path).open(encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x"))
    data = np.array([[float(v) for v in row] for row in body])
    idx = data[:, 0].astype(int)
    if len(idx) != mesh.num_nodes or set(idx.tolist()) != set(range(mesh.num_nodes)):
        raise ValueError("CSV nodes do not match the mesh")
    order = np.argsort(idx)
    x = data[order, 1 : 1 + n]
    if x.shape[1] != mesh.n or np.max(np.abs(x - mesh.vertices)) > tol:
        raise ValueError("CSV node coordinates do not match the mesh")
    return VectorField(mesh, data[order, 1 + n :])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    """Stable JSON: sorted keys, UTF-8, non-finite floats as strings."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj), encoding="utf-8")
    return path


def write_csv_table(path, header: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path
