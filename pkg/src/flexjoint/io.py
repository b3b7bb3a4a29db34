"""Delimited-text trajectory/record files, manifests and report artifacts.

Every data file starts with ``#`` header lines of ``key: value`` pairs that
always include the tool version, the config digest and the seed. Floats are
written with 17 significant digits, so a read/write cycle is exact and reruns
reproduce files byte for byte. Wall-clock information only goes to
``<file>.meta.json`` sidecars.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from .trajectory import ExecutionRecord, Trajectory

TOOL_VERSION = "0.1.0"
FLOAT_FMT = "%.17g"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def provenance(config_digest: str, seed) -> dict:
    return {"tool_version": TOOL_VERSION, "config_digest": config_digest, "seed": seed}


def write_sidecar(path, **extra):
    """Timestamps and host details for ``path``, kept out of the data file itself."""
    meta = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "pid": os.getpid(), **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, default=_jsonable) + "\n")


def _header_lines(header: dict) -> str:
    return "".join(f"# {k}: {json.dumps(v, sort_keys=True, default=_jsonable)}\n" for k, v in header.items())


def write_table(path, columns, data, header: dict):
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != len(columns):
        raise ValueError("column count does not match the data")
    lines = [_header_lines(header), "# columns: " + ",".join(columns) + "\n"]
    lines += [",".join(FLOAT_FMT % v for v in row) + "\n" for row in data]
    Path(path).write_text("".join(lines))


def read_table(path):
    """Returns ``(header, columns, data)``."""
    header, columns, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition(": ")
            if key == "columns":
                columns = value.split(",")
            else:
                header[key] = json.loads(value)
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    if columns is None:
        raise ValueError(f"E-DATA {path}: missing '# columns' line")
    data = np.array(rows, dtype=float).reshape(-1, len(columns))
    return header, columns, data


def _state_columns(prefix, n):
    return [f"{prefix}{kind}[{j}]" for kind in ("q", "qd", "qdd") for j in range(n)]


def write_trajectory(path, traj: Trajectory, header: dict):
    n = traj.n_joints
    acc = traj.accelerations if traj.accelerations is not None else np.zeros_like(traj.positions)
    data = np.hstack([traj.times[:, None], traj.positions, traj.velocities, acc])
    write_table(path, ["t"] + _state_columns("", n), data,
                {**header, "n_joints": n, "dt": traj.dt, "has_acc": traj.accelerations is not None})


def read_trajectory(path) -> Trajectory:
    header, _, data = read_table(path)
    n = header["n_joints"]
    acc = data[:, 1 + 2 * n:1 + 3 * n] if header.get("has_acc", True) else None
    return Trajectory(data[:, 1:1 + n], data[:, 1 + n:1 + 2 * n], acc, header["dt"])


def write_record(path, rec: ExecutionRecord, header: dict):
    n = rec.desired.n_joints
    d, a = rec.desired, rec.actual
    data = np.hstack([d.times[:, None], d.states(), a.states()])
    meta = {"n_nominal": rec.n_nominal, "max_speed": rec.max_speed, "payload": rec.payload,
            "record_seed": rec.seed, "inverted": rec.inverted, "converged": rec.converged,
            "n_joints": n, "dt": d.dt}
    write_table(path, ["t"] + _state_columns("d_", n) + _state_columns("a_", n), data, {**header, **meta})


def read_record(path) -> ExecutionRecord:
    h, _, data = read_table(path)
    n, dt = h["n_joints"], h["dt"]

    def traj(offset):
        block = data[:, offset:offset + 3 * n]
        return Trajectory(block[:, :n], block[:, n:2 * n], block[:, 2 * n:], dt)

    return ExecutionRecord(traj(1), traj(1 + 3 * n), h["n_nominal"], h["max_speed"], h["payload"],
                           h["record_seed"], h["inverted"], h["converged"])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


TIMING_KEYS = ("inference_s",)


def report_timings(report) -> dict:
    """Wall-clock fields per row, keyed ``model@condition``; these belong in sidecars."""
    return {f"{r['model']}@{r['condition']}": {k: r[k] for k in TIMING_KEYS if k in r}
            for r in report.rows}


def write_report(out_dir, report, header: dict) -> list:
    """Delimited table + structured summary (+ an (x, y, ci) file for speed sweeps).

    Timing fields are left out so reruns are byte-identical; see ``report_timings``.
    """
    from .pipeline import METRICS
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = report.experiment
    cols = ["model", "condition"]
    for m in METRICS:
        cols += [m, m + "_ci", m + "_improvement_pct"]
    cols.append("n_capped")
    lines = [_header_lines(header), "# columns: " + ",".join(cols) + "\n"]
    for row in report.rows:
        cells = []
        for c in cols:
            v = row.get(c, "")
            cells.append(FLOAT_FMT % v if isinstance(v, float) else ("" if v is None else str(v)))
        lines.append(",".join(cells) + "\n")
    files = [out_dir / f"{stem}.csv"]
    files[0].write_text("".join(lines))
    rows = [{k: v for k, v in r.items() if k not in TIMING_KEYS} for r in report.rows]
    summary = {**header, "experiment": stem, "rows": rows, "reference": report.reference}
    files.append(out_dir / f"{stem}.json")
    write_json(files[-1], summary)
    if stem == "speed_sweep":
        rows = [r for r in report.rows if r["model"] == "Baseline"]
        files.append(out_dir / "speed_sweep_xy.csv")
        write_table(files[-1], ["x_max_speed", "y_e_pos", "ci_e_pos"],
                    [[r["condition"], r["e_pos"], r["e_pos_ci"]] for r in rows], header)
    return files
