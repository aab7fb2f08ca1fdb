"""Plot-ready CSV and JSON output for runner reports.

Schemas (one header row, UTF-8, LF line endings)::

    paths       step,t,particle,x..,a..
    moments     step,t,mean_x..,var_x..,mean_a..
    adjoint     step,t,particle,y..,z..
    comparison  dt,sup_error,order_estimate

A vector column is a bare name in dimension one (``x``) and indexed otherwise
(``x0,x1``); ``z`` is indexed by state then noise component (``z0_1``).
Floats are written with ``repr`` so that reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STAGES = ("paths", "moments", "adjoint", "comparison")


class MissingStageError(LookupError):
    def __init__(self, what: str, mode: str):
        super().__init__(f"no {what} data: the {mode} run has no {what} stage")
        self.what = what


def _names(prefix: str, n: int) -> list[str]:
    return [prefix] if n == 1 else [f"{prefix}{i}" for i in range(n)]


def _z_names(n: int, r: int) -> list[str]:
    if n == 1 and r == 1:
        return ["z"]
    return [f"z{i}_{j}" for i in range(n) for j in range(r)]


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return repr(v) if math.isfinite(v) else str(v)


def paths_header(n: int, l: int) -> list[str]:
    return ["step", "t", "particle", *_names("x", n), *_names("a", l)]


def moments_header(n: int, l: int) -> list[str]:
    return ["step", "t", *_names("mean_x", n), *_names("var_x", n), *_names("mean_a", l)]


def adjoint_header(n: int, r: int) -> list[str]:
    return ["step", "t", "particle", *_names("y", n), *_z_names(n, r)]


COMPARISON_HEADER = ["dt", "sup_error", "order_estimate"]


def _write(path: Path, header: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    return path


def write_paths(path, ens, particles: int | None = None) -> Path:
    X, U = ens.states, ens.controls
    N, M1, n = X.shape
    count = N if particles is None else min(N, particles)
    t = ens.grid.nodes

    def rows():
        for k in range(M1):
            for i in range(count):
                yield [k, _fmt(t[k]), i, *map(_fmt, X[i, k]), *map(_fmt, U[i, k])]

    return _write(path, paths_header(n, U.shape[2]), rows())


def moments_table(ens) -> dict[str, np.ndarray]:
    X = np.asarray(ens.states)
    return {"mean_x": X.mean(axis=0), "var_x": X.var(axis=0), "mean_a": np.asarray(ens.controls).mean(axis=0)}


def write_moments(path, t, mean_x, var_x, mean_a) -> Path:
    mean_x, var_x, mean_a = (np.asarray(a, dtype=float).reshape(len(t), -1) for a in (mean_x, var_x, mean_a))

    def rows():
        for k in range(len(t)):
            yield [k, _fmt(t[k]), *map(_fmt, mean_x[k]), *map(_fmt, var_x[k]), *map(_fmt, mean_a[k])]

    return _write(path, moments_header(mean_x.shape[1], mean_a.shape[1]), rows())


def write_adjoint(path, grid, adjoint, particles: int | None = None) -> Path:
    """Z lives on steps 0..M-1; its cells are empty at the terminal node."""
    Y, Z = adjoint.Y, adjoint.Z
    N, M1, n = Y.shape
    r = Z.shape[3]
    count = N if particles is None else min(N, particles)
    t = grid.nodes

    def rows():
        for k in range(M1):
            for i in range(count):
                z = Z[i, k].reshape(-1) if k < M1 - 1 else [None] * (n * r)
                yield [k, _fmt(t[k]), i, *map(_fmt, Y[i, k]), *map(_fmt, z)]

    return _write(path, adjoint_header(n, r), rows())


def write_comparison(path, table) -> Path:
    return _write(path, COMPARISON_HEADER, ([_fmt(d), _fmt(e), _fmt(o)] for d, e, o in table.rows()))


@dataclass
class RunReport:
    mode: str
    scenario_hash: str
    results: dict = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    data: dict = field(default_factory=dict)  # in-memory stage outputs, never serialized
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "scenario_hash": self.scenario_hash,
            "status": self.status,
            "results": self.results,
            "timings": self.timings,
            "artifacts": self.artifacts,
        }


def jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def emit_csv(report: RunReport, what: str, out_dir, particles: int | None = None) -> Path:
    """Write one CSV stage of a run into ``out_dir/<what>.csv``."""
    if what not in STAGES:
        raise ValueError(f"unknown CSV kind {what!r}")
    if what not in report.data:
        raise MissingStageError(what, report.mode)
    payload = report.data[what]
    target = Path(out_dir) / f"{what}.csv"
    if what == "paths":
        path = write_paths(target, payload, particles)
    elif what == "moments":
        path = write_moments(target, *payload)
    elif what == "adjoint":
        grid, adj = payload
        path = write_adjoint(target, grid, adj, particles)
    else:
        path = write_comparison(target, payload)
    report.artifacts[what] = path.name
    return path
