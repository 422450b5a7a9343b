"""CSV/JSON persistence. Every float goes out with 17 significant digits so
files round-trip bit-exactly and reruns are byte-comparable."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError

FLOAT_FMT = "{:.17g}"


def fmt(v) -> str:
    """Format one CSV cell; floats get 17 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContractError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_trajectories_csv(trajs, path) -> None:
    d = trajs.states.shape[2]
    header = ["traj_id", "tau", *[f"x{i}" for i in range(d)]]
    rows = (
        [j, tau, *trajs.states[tau, j]]
        for j in range(trajs.n)
        for tau in range(trajs.T, -1, -1)
    )
    write_csv(path, header, rows)


def write_buffer_csv(buffer, path) -> None:
    x, r, it = buffer.arrays()
    header = [*[f"x{i}" for i in range(buffer.dim)], "reward", "iter"]
    write_csv(path, header, ([*xi, ri, int(ti)] for xi, ri, ti in zip(x, r, it)))


def read_buffer_csv(path):
    from .rl import SampleBuffer

    header, rows = read_csv(path)
    if header[-2:] != ["reward", "iter"]:
        raise ContractError(f"{path}: not a buffer CSV")
    dim = len(header) - 2
    buf = SampleBuffer(dim)
    for row in rows:
        buf.push([float(v) for v in row[:dim]], float(row[dim]), int(row[dim + 1]))
    return buf


METRICS_COLUMNS = ("iter", "estimator", "mean_reward", "critic_loss", "score_loss",
                   "kl_to_ref", "grad_norm", "wallclock_ms")


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    write_csv(path, METRICS_COLUMNS, ([r[k] for k in METRICS_COLUMNS] for r in rows))


def read_metrics_csv(path) -> list[dict]:
    header, rows = read_csv(path)
    out = []
    for row in rows:
        rec = dict(zip(header, row))
        out.append({k: (v if k == "estimator" else (int(v) if k == "iter" else float(v)))
                    for k, v in rec.items()})
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if not math.isfinite(f):
            raise ContractError(f"non-finite value {f} cannot be written as JSON")
        return f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(obj, path) -> None:
    """Deterministic JSON (sorted keys, shortest round-trip floats)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
