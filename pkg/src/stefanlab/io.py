"""Field, table and JSON serialization with 17-significant-digit floats."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from .grid import Grid

MAGIC = b"STFLD001"
_HEADER = struct.Struct("<8sIIdd")      # magic, dim, cells, h, R_box


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


def write_field(path, grid: Grid, values: np.ndarray) -> Path:
    """Flat little-endian float64 array after a small header (dim, cells, h, R_box)."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.shape != grid.shape:
        raise ValueError(f"field shape {values.shape} does not match grid {grid.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.dim, grid.cells, grid.h, grid.R_box))
        fh.write(values.tobytes())
    return path


def read_field(path) -> tuple[Grid, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, dim, cells, h, R_box = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a field file")
    grid = Grid(dim=dim, R_box=R_box, cells=cells)
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return grid, data.reshape(grid.shape).copy()


def slice_rows(grid: Grid, values: np.ndarray, axis: int = 2):
    """Rows (x, y, value) of the central slice normal to ``axis``."""
    mid = grid.cells // 2
    sl = np.take(values, mid, axis=axis)
    ax = grid.axis
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    return zip(X.ravel(), Y.ravel(), sl.ravel())


def _plain(o):
    if is_dataclass(o) and not isinstance(o, type):
        return {k: _plain(v) for k, v in asdict(o).items()}
    if isinstance(o, dict):
        return {str(k): _plain(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    if isinstance(o, np.ndarray):
        return _plain(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    return o


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def to_plain(obj):
    return _plain(obj)
