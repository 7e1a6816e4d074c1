"""File formats: heightfield CSV, 16-bit PGM with JSON sidecar, stair spec JSON."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .terrain import HeightField, StairSpec


def write_grid_csv(path, grid: np.ndarray, fmt: str = "%.6f") -> None:
    """Header row of ``nx`` column indices, then ``ny`` rows; row ``j`` holds ``grid[:, j]``.

    Missing (NaN) cells are written as empty fields.
    """
    grid = np.asarray(grid, dtype=float)
    nx, ny = grid.shape
    lines = [",".join(str(i) for i in range(nx))]
    for j in range(ny):
        lines.append(",".join("" if np.isnan(v) else fmt % v for v in grid[:, j]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_csv(path) -> np.ndarray:
    rows = Path(path).read_text().strip().split("\n")
    nx = len(rows[0].split(","))
    data = [[float(v) if v else np.nan for v in row.split(",")] for row in rows[1:]]
    grid = np.array(data, dtype=float).T
    if grid.shape[0] != nx:
        raise ValueError(f"{path}: header lists {nx} columns, rows have {grid.shape[0]}")
    return grid


def pgm_scale(grid: np.ndarray) -> tuple[float, float]:
    """Affine map ``value = offset + scale * pixel`` covering the finite range of ``grid``."""
    finite = grid[np.isfinite(grid)]
    if finite.size == 0:
        return 0.0, 1.0
    lo, hi = float(finite.min()), float(finite.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 1.0
    return lo, scale


def write_pgm16(path, grid: np.ndarray) -> dict:
    """Binary 16-bit PGM, image row ``j`` = ``grid[:, j]``; NaN cells become pixel 0.

    Returns the affine scale for the sidecar manifest.
    """
    grid = np.asarray(grid, dtype=float)
    offset, scale = pgm_scale(grid)
    pix = np.where(np.isfinite(grid), np.rint((grid - offset) / scale), 0.0)
    pix = np.clip(pix, 0, 65535).astype(">u2")
    nx, ny = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n65535\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pix.T).tobytes())
    return {"offset": offset, "scale": scale, "maxval": 65535, "missing_pixel": 0 if np.isnan(grid).any() else None}


def read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    nx, ny = map(int, parts[1].split())
    pix = np.frombuffer(parts[3], dtype=">u2").reshape(ny, nx)
    return pix.T.astype(np.int64)


def export_heightfield(hf: HeightField, out_dir, stem: str) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    pgm_path = out / f"{stem}.pgm"
    json_path = out / f"{stem}.json"
    write_grid_csv(csv_path, hf.heights)
    scale = write_pgm16(pgm_path, hf.heights)
    manifest = {
        "spec": hf.spec.to_dict(),
        "seed": hf.seed,
        "cell_size": hf.cell_size,
        "nx": hf.nx,
        "ny": hf.ny,
        "spawn_pose": list(hf.spawn_pose),
        "goal_pose": list(hf.goal_pose),
        "centerline": hf.centerline.tolist(),
        "pgm": {"file": pgm_path.name, **scale},
        "csv": csv_path.name,
    }
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [csv_path, pgm_path, json_path]


def load_spec_json(path) -> StairSpec:
    return StairSpec.from_dict(json.loads(Path(path).read_text()))
