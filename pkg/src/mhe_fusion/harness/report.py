"""CSV and JSON reports of benchmark runs.

Per-step CSV (one row per process stamp)::

    stamp, truth_x, truth_y, truth_heading,
    estimate_x, estimate_y, estimate_heading,          # first optimized estimate, empty if none
    propagated_x, propagated_y, propagated_heading,    # real-time estimate, empty before start
    position_error, heading_error, consistency

JSON summary (``schema_version`` = ``REPORT_SCHEMA_VERSION``)::

    {"schema_version", "estimator", "config_hash", "scenario", "seed", "sensors",
     "batch_size", "threads", "rms_position_error", "rms_heading_error",
     "consistency_rms", "rms_delayed_position_error", "steps", "dropped",
     "timing": {"solve_time_mean", "solve_time_median", "solve_time_max"}}

A sensor matrix report (``matrix.csv``) has one row per sensor
configuration, averaging the summaries of its runs.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np

from ..manifold import wrap_angle
from ..problem import ConfigurationError
from .config import SimConfig
from .runner import MetricsReport, TrajectoryLog

REPORT_SCHEMA_VERSION = 1

STEP_COLUMNS = ("stamp", "truth_x", "truth_y", "truth_heading", "estimate_x", "estimate_y",
                "estimate_heading", "propagated_x", "propagated_y", "propagated_heading",
                "position_error", "heading_error", "consistency")

MATRIX_COLUMNS = ("sensors", "runs", "rms_position_error", "rms_heading_error", "consistency_rms",
                  "solve_time_median")


class ReportError(OSError):
    pass


@dataclass
class RunResult:
    config: SimConfig
    log: TrajectoryLog
    metrics: MetricsReport

    @property
    def estimator(self):
        return self.metrics.estimator


def _fmt(v):
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def step_rows(log: TrajectoryLog) -> List[List[str]]:
    pos_err = np.linalg.norm(log.position - log.truth_position, axis=1)
    head_err = np.abs(wrap_angle(log.heading - log.truth_heading))
    cons = np.linalg.norm(log.delayed_position - log.position, axis=1)
    rows = []
    for k, t in enumerate(log.stamps):
        rows.append([_fmt(t), *map(_fmt, log.truth_position[k]), _fmt(log.truth_heading[k]),
                     *map(_fmt, log.delayed_position[k]), _fmt(log.delayed_heading[k]),
                     *map(_fmt, log.position[k]), _fmt(log.heading[k]),
                     _fmt(pos_err[k]), _fmt(head_err[k]), _fmt(cons[k])])
    return rows


def summary(result: RunResult) -> Dict:
    m, cfg = result.metrics, result.config
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "estimator": m.estimator,
        "config_hash": cfg.config_hash(),
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "sensors": cfg.sensors.label(),
        "batch_size": cfg.estimator.batch_size,
        "threads": cfg.estimator.threads,
        "rms_position_error": m.rms_position_error,
        "rms_heading_error": m.rms_heading_error,
        "consistency_rms": m.consistency_rms,
        "rms_delayed_position_error": m.rms_delayed_position_error,
        "steps": m.steps,
        "dropped": m.dropped,
        "timing": {"solve_time_mean": m.solve_time_mean,
                   "solve_time_median": m.solve_time_median,
                   "solve_time_max": m.solve_time_max},
    }


def sensor_matrix(results: Iterable[RunResult]) -> List[Dict]:
    """One averaged row per sensor configuration, in first-seen order."""
    groups: Dict[str, List[RunResult]] = {}
    for r in results:
        groups.setdefault(r.config.sensors.label(), []).append(r)
    rows = []
    for label, rs in groups.items():
        rows.append({
            "sensors": label,
            "runs": len(rs),
            "rms_position_error": float(np.mean([r.metrics.rms_position_error for r in rs])),
            "rms_heading_error": float(np.mean([r.metrics.rms_heading_error for r in rs])),
            "consistency_rms": float(np.mean([r.metrics.consistency_rms for r in rs])),
            "solve_time_median": float(np.median([r.metrics.solve_time_median for r in rs])),
        })
    return rows


def _run_name(result: RunResult, index: int, total: int):
    base = f"{result.estimator}_{result.config.config_hash()}"
    return base if total == 1 else f"{base}_{index:03d}"


def _writable_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create report directory {out}: {exc}") from exc
    if not out.is_dir():
        raise ReportError(f"{out} is not a directory")
    return out


def _write(path: Path, writer):
    try:
        with open(path, "w", newline="") as fh:
            writer(fh)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc


def write_step_csv(log: TrajectoryLog, path):
    def w(fh):
        out = csv.writer(fh)
        out.writerow(STEP_COLUMNS)
        out.writerows(step_rows(log))
    _write(Path(path), w)


def write_summary_json(result: RunResult, path):
    _write(Path(path), lambda fh: json.dump(summary(result), fh, indent=2, sort_keys=True))


def write_matrix_csv(results: Sequence[RunResult], path):
    def w(fh):
        out = csv.DictWriter(fh, fieldnames=MATRIX_COLUMNS)
        out.writeheader()
        out.writerows(sensor_matrix(results))
    _write(Path(path), w)


def report(results: Sequence[RunResult], out_dir, fmt: str = "json") -> List[Path]:
    """Write reports for ``results`` into ``out_dir``; returns the written paths.

    ``fmt`` is ``"csv"`` (per-step logs, plus ``matrix.csv`` when several
    sensor configurations are present) or ``"json"`` (one summary per run
    plus ``summary.json`` listing all of them).
    """
    if not results:
        raise ValueError("report needs at least one run")
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    out = _writable_dir(out_dir)
    written = []
    for i, r in enumerate(results):
        name = _run_name(r, i, len(results))
        if fmt == "csv":
            p = out / f"{name}.csv"
            write_step_csv(r.log, p)
        else:
            p = out / f"{name}.json"
            write_summary_json(r, p)
        written.append(p)
    if fmt == "json":
        p = out / "summary.json"
        _write(p, lambda fh: json.dump({"schema_version": REPORT_SCHEMA_VERSION,
                                        "runs": [summary(r) for r in results]}, fh, indent=2))
        written.append(p)
    elif len({r.config.sensors.label() for r in results}) > 1:
        p = out / "matrix.csv"
        write_matrix_csv(results, p)
        written.append(p)
    return written


# ---------------------------------------------------------------------- run persistence

_LOG_ARRAYS = ("stamps", "truth_position", "truth_heading", "position", "heading",
               "delayed_position", "delayed_heading", "smoothed_position")


def save_run(result: RunResult, directory) -> Path:
    """Store a run (config, metrics, log) so ``load_run`` can rebuild it for reporting."""
    d = _writable_dir(directory)
    meta = {"schema_version": REPORT_SCHEMA_VERSION, "config": result.config.to_dict(),
            "metrics": result.metrics.to_dict(), "solve_times": list(result.log.solve_times),
            "dropped": result.log.dropped}
    _write(d / "run.json", lambda fh: json.dump(meta, fh, indent=1))
    try:
        np.savez(d / "log.npz", **{k: getattr(result.log, k) for k in _LOG_ARRAYS})
    except OSError as exc:
        raise ReportError(f"cannot write {d / 'log.npz'}: {exc}") from exc
    return d


def load_run(directory) -> RunResult:
    d = Path(directory)
    try:
        meta = json.loads((d / "run.json").read_text())
        arrays = np.load(d / "log.npz")
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read run in {d}: {exc}") from None
    if meta.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ConfigurationError(f"run schema {meta.get('schema_version')} is not supported")
    metrics = MetricsReport(**meta["metrics"])
    log = TrajectoryLog(metrics.estimator, *(arrays[k] for k in _LOG_ARRAYS),
                        solve_times=meta["solve_times"], dropped=meta["dropped"])
    return RunResult(SimConfig.from_dict(meta["config"]), log, metrics)
