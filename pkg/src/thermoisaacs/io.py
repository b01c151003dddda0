"""Reading and writing solver outputs: sector CSVs, JSON files and run manifests.

Floats are written with :func:`repr`, the shortest string that round-trips,
so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np

from . import __version__
from .grid import SectorGrid, build_grid
from .problem import SECTORS, GameProblem, load_problem, problem_digest
from .solver import SolverConfig, ValueField

__all__ = [
    "fmt",
    "write_csv",
    "read_csv",
    "write_json",
    "sector_filename",
    "write_value_field",
    "read_value_field",
    "timestamp",
    "write_manifest",
    "read_manifest",
    "load_solution",
]

MANIFEST = "manifest.json"


def fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body], dtype=float).reshape(
        len(body), len(header))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def sector_filename(kind: str, w: int, z: int) -> str:
    return f"{kind}_w{w:+d}_z{z:+d}.csv"


def write_value_field(V: ValueField, outdir, kind: str) -> list[str]:
    """One CSV per sector with grid multi-indices, coordinates and values."""
    g = V.grid
    n, m = len(g.shape_x), len(g.shape_y)
    header = ([f"i{k + 1}" for k in range(n)] + [f"j{k + 1}" for k in range(m)]
              + [f"x{k + 1}" for k in range(n)] + [f"y{k + 1}" for k in range(m)] + ["V"])
    names = []
    for w, z in SECTORS:
        sx, sy = g.X[w], g.Y[z]
        mi_x = np.stack(np.unravel_index(sx.global_ids, g.shape_x), axis=-1)
        mi_y = np.stack(np.unravel_index(sy.global_ids, g.shape_y), axis=-1)
        data = V.data[(w, z)]
        rows = ([*mi_x[a], *mi_y[b], *sx.coords[a], *sy.coords[b], data[a, b]]
                for a in range(sx.size) for b in range(sy.size))
        name = sector_filename(kind, w, z)
        write_csv(Path(outdir) / name, header, rows)
        names.append(name)
    return names


def read_value_field(grid: SectorGrid, indir, kind: str) -> ValueField:
    n, m = len(grid.shape_x), len(grid.shape_y)
    data = {}
    for w, z in SECTORS:
        header, arr = read_csv(Path(indir) / sector_filename(kind, w, z))
        sx, sy = grid.X[w], grid.Y[z]
        gx = np.ravel_multi_index(tuple(arr[:, :n].astype(int).T), grid.shape_x)
        gy = np.ravel_multi_index(tuple(arr[:, n:n + m].astype(int).T), grid.shape_y)
        lx = np.searchsorted(sx.global_ids, gx)
        ly = np.searchsorted(sy.global_ids, gy)
        if (np.any(lx >= sx.size) or np.any(sx.global_ids[np.minimum(lx, sx.size - 1)] != gx)
                or np.any(ly >= sy.size) or np.any(sy.global_ids[np.minimum(ly, sy.size - 1)] != gy)):
            raise ValueError(f"sector ({w}, {z}) file does not match the grid")
        field = np.full((sx.size, sy.size), np.nan)
        field[lx, ly] = arr[:, -1]
        if np.any(np.isnan(field)):
            raise ValueError(f"sector ({w}, {z}) file is missing nodes")
        data[(w, z)] = field
    return ValueField(grid, data)


def timestamp() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH for reproducible builds."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_manifest(outdir) -> dict:
    with open(Path(outdir) / MANIFEST) as fh:
        return json.load(fh)


def write_manifest(outdir, command: str, problem_path, config: dict, files, started: str,
                   extra: dict | None = None) -> None:
    """Write (or extend) the single manifest of ``outdir``.

    Files already listed by an earlier manifest in the same directory are
    kept, so every file in the directory stays accounted for.
    """
    outdir = Path(outdir)
    listed = set(files)
    if (outdir / MANIFEST).exists():
        listed |= {f["name"] for f in read_manifest(outdir).get("files", [])}
    listed = sorted(name for name in listed if (outdir / name).exists())
    manifest = {
        "tool": "thermoisaacs",
        "version": __version__,
        "command": command,
        "problem_file": str(problem_path) if problem_path is not None else None,
        "problem_hash": f"sha256:{problem_digest(problem_path)}" if problem_path else None,
        "config": config,
        "timestamps": {"started": started, "finished": timestamp()},
        "files": [{"name": name, "sha256": _sha256(outdir / name)} for name in listed],
    }
    if extra:
        manifest.update(extra)
    write_json(outdir / MANIFEST, manifest)


def load_solution(soldir, kind: str | None = None, problem_path=None):
    """Rebuild ``(problem, grid, config, field)`` from a ``solve`` output directory."""
    man = read_manifest(soldir)
    path = problem_path or man["problem_file"]
    problem: GameProblem = load_problem(path)
    if man.get("problem_hash") and man["problem_hash"] != f"sha256:{problem_digest(path)}":
        raise ValueError(f"problem file {path} does not match the solution's recorded hash")
    cfg = man["config"]
    kinds = cfg["kinds"]
    kind = kind or kinds[0]
    if kind not in kinds:
        raise ValueError(f"solution has no {kind} value (has {', '.join(kinds)})")
    gcfg = cfg["grid"]
    grid = build_grid(problem, nx=gcfg["nx"], ny=gcfg["ny"], h=gcfg["h"])
    scfg = cfg["solver"]
    config = SolverConfig(value_kind=kind, staging=scfg["staging"], tol=scfg["tol"],
                          max_iter=scfg["max_iter"], discount_form=scfg["discount_form"],
                          order_tol=scfg["order_tol"])
    return problem, grid, config, read_value_field(grid, soldir, kind)
