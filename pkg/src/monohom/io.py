"""Field snapshots (raw float64 + JSON sidecar) and deterministic CSV tables."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .grid import Grid


def write_field(path, values: np.ndarray, grid: Grid, name: str, seed=None) -> Path:
    """Write ``values`` (shape ``components + grid.shape``) as little-endian float64 in row-major order.

    The sidecar ``<path>.json`` records ``{d, L, N, components, name, seed}``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(values, dtype="<f8")
    comps = list(arr.shape[: arr.ndim - grid.d])
    if tuple(arr.shape[arr.ndim - grid.d:]) != grid.shape:
        raise ValueError("field shape does not end in the grid shape")
    arr.tofile(path)
    meta = {"d": grid.d, "L": grid.L, "N": grid.N, "components": comps, "name": name,
            "seed": None if seed is None else list(seed) if isinstance(seed, tuple) else seed}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_field(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    shape = tuple(meta["components"]) + (meta["N"],) * meta["d"]
    return np.fromfile(path, dtype="<f8").reshape(shape), meta


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        # repr round-trips exactly, so equal numbers give equal bytes
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            if len(r) != len(header):
                raise ValueError("row length does not match header")
            w.writerow([_cell(v) for v in r])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
