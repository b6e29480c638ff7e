"""Replay a dataset through the MHE engine or the IEKF baseline and score it.

Playback is logical: measurements are consumed in stamp order, process
samples before updates at equal stamps.  The real-time estimate is the
newest estimate forward-propagated through the propagation source, recorded
at every sample of that source before any update at the same stamp is
applied.  The delayed estimate of a state is its value when it leaves the
window (MHE) or the posterior right after its updates (IEKF).  The
consistency measure at a stamp is the position distance between the two.
"""
from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from itertools import groupby
from typing import Dict, List, Optional

import numpy as np

from ..engine import Engine, EngineConfig
from ..manifold import Angle, Euclidean, ParameterBlock, wrap_angle
from ..models import (ConstVelNoise, ConstVelProcess, DiffDriveParams, DiffDriveProcess,
                      JointOdometryUpdate, LandmarkPoseUpdate, PositionUpdate)
from ..problem import ConfigurationError, ProcessMeasurement
from ..solver import Huber, SolverOptions
from .config import SimConfig
from .iekf import IEKF
from .simulate import SIGMA_FLOOR, Dataset


class EstimatorError(RuntimeError):
    """An estimator failed during replay; ``step`` is the measurement-group index."""

    def __init__(self, message, step=None, stamp=None):
        super().__init__(message)
        self.step = step
        self.stamp = stamp


# ---------------------------------------------------------------------- model setup


@dataclass
class ModelSetup:
    state_blocks: Dict
    update_models: Dict
    process_models: Dict
    statics: Dict[str, ParameterBlock]
    spawn_sources: set
    propagation_source: str
    prefix: str
    initial_values: Dict[str, np.ndarray]
    initial_sigma: Dict[str, np.ndarray]


def _pose_blocks(prefix, velocity=True):
    out = {prefix + "position": Euclidean(2), prefix + "heading": Angle()}
    if velocity:
        out[prefix + "velocity"] = Euclidean(2)
    return out


def estimator_noise(cfg: SimConfig):
    nz = cfg.noise
    cv = ConstVelNoise(gyro_var=max(nz.gyro, SIGMA_FLOOR) ** 2, accel_var=max(nz.accel, 1e-2) ** 2)
    dd = DiffDriveParams(position_var=1e-6, heading_var=1e-7)
    return cv, dd


def model_setup(ds: Dataset, seed_offset: int = 7919) -> ModelSetup:
    """Models, statics and a perturbed initial state for ``ds``.

    The initial guess is the truth at the first spawning update plus a draw
    scaled by ``estimator.initial_sigma * noise.initial``; its seed is
    derived from the dataset seed so MHE and IEKF start identically.
    """
    cfg = ds.config
    cv, dd = estimator_noise(cfg)
    statics = {}
    for i, lm in enumerate(ds.landmarks):
        statics[f"landmark{i}.position"] = ParameterBlock(Euclidean(2), lm[:2], False)
        statics[f"landmark{i}.heading"] = ParameterBlock(Angle(), lm[2:3], False)
    if cfg.scenario == "arm":
        blocks = {**_pose_blocks("base_", velocity=False), **_pose_blocks("ee_")}
        updates = {"camera": LandmarkPoseUpdate("base_", offset="camera_offset"),
                   "ee_camera": LandmarkPoseUpdate("ee_"),
                   "arm": JointOdometryUpdate("base_", "ee_", "arm_links", (None, "joint1_bias"))}
        process = {"wheels": DiffDriveProcess(dd, "base_"), "imu": ConstVelProcess(cv, "ee_")}
        statics["camera_offset"] = ParameterBlock(Euclidean(2), np.zeros(2), True)
        statics["joint1_bias"] = ParameterBlock(Euclidean(1), np.zeros(1), True)
        statics["arm_links"] = ParameterBlock(Euclidean(2), ds.statics_truth["arm_links"], False)
        spawn, prop, prefixes = {"arm"}, "wheels", ("base_", "ee_")
    else:
        blocks = _pose_blocks("")
        updates, process = {}, {"imu": ConstVelProcess(cv)}
        spawn = set()
        if cfg.sensors.camera:
            updates["camera"] = LandmarkPoseUpdate("")
            spawn.add("camera")
        if cfg.sensors.camera2:
            updates["camera2"] = LandmarkPoseUpdate("", offset="camera2_offset")
            statics["camera2_offset"] = ParameterBlock(
                Euclidean(2), np.asarray(cfg.landmarks.camera2_offset, dtype=float), False)
            spawn.add("camera2")
        if cfg.sensors.gps:
            updates["gps"] = PositionUpdate("position")
            spawn.add("gps")
        if cfg.sensors.wheels:
            process["wheels"] = DiffDriveProcess(dd)
        prop, prefixes = "imu", ("",)
    first = next((m for m in ds.measurements if m.source in spawn), None)
    if first is None:
        raise ConfigurationError("dataset has no measurement from a spawning sensor")
    rng = np.random.default_rng(cfg.seed + seed_offset)
    sig_p, sig_h, sig_v = cfg.estimator.initial_sigma
    values, sigma = {}, {}
    for pre in prefixes:
        truth = ds.truth_at(first.stamp, pre)
        for n, s in (("position", sig_p), ("heading", sig_h), ("velocity", sig_v)):
            if pre + n not in blocks:
                continue
            v = np.atleast_1d(np.asarray(truth[n], dtype=float))
            s = np.full(v.size, s)
            values[pre + n] = v + rng.normal(size=v.size) * s * cfg.noise.initial
            sigma[pre + n] = s
    if "base_heading" in values:
        values["base_heading"] = wrap_angle(values["base_heading"])
    return ModelSetup(blocks, updates, process, statics, spawn, prop, prefixes[0], values, sigma)


def engine_config(ds: Dataset, setup: Optional[ModelSetup] = None, **overrides) -> EngineConfig:
    setup = setup or model_setup(ds)
    est = ds.config.estimator
    solver = SolverOptions(max_iterations=est.max_iterations, worker_count=est.threads,
                           loss=Huber(est.huber) if est.huber > 0 else None)
    kw = dict(state_blocks=setup.state_blocks, update_models=setup.update_models,
              process_models=setup.process_models, spawn_sources=setup.spawn_sources,
              batch_size=est.batch_size, propagation_source=setup.propagation_source,
              statics=setup.statics, initial_values=setup.initial_values,
              initial_info={n: 1.0 / s ** 2 for n, s in setup.initial_sigma.items()},
              use_seed=False, solver=solver)
    kw.update(overrides)
    return EngineConfig(**kw)


# ---------------------------------------------------------------------- logs and metrics


@dataclass
class TrajectoryLog:
    estimator: str
    stamps: np.ndarray
    truth_position: np.ndarray
    truth_heading: np.ndarray
    position: np.ndarray           # real-time (forward-propagated) estimate
    heading: np.ndarray
    delayed_position: np.ndarray   # first optimized estimate; NaN where no state was estimated
    delayed_heading: np.ndarray
    smoothed_position: np.ndarray  # final estimate once the state left the window
    solve_times: List[float] = field(default_factory=list)
    dropped: int = 0

    @classmethod
    def empty(cls, estimator, ds: Dataset, prefix):
        n = len(ds.stamps)
        nan2, nan1 = np.full((n, 2), np.nan), np.full(n, np.nan)
        return cls(estimator, ds.stamps.copy(), ds.truth[prefix + "position"].copy(),
                   ds.truth[prefix + "heading"].copy(), nan2.copy(), nan1.copy(), nan2.copy(),
                   nan1.copy(), nan2.copy())


@dataclass
class MetricsReport:
    estimator: str
    rms_position_error: float
    rms_heading_error: float
    consistency_rms: float
    rms_delayed_position_error: float
    solve_time_mean: float
    solve_time_median: float
    solve_time_max: float
    dropped: int
    steps: int
    consistency_samples: int

    def to_dict(self):
        return asdict(self)


def _rms(x):
    x = np.asarray(x, dtype=float)
    return float(math.sqrt(np.mean(x * x))) if x.size else float("nan")


def compute_metrics(log: TrajectoryLog) -> MetricsReport:
    ok = ~np.isnan(log.position[:, 0])
    pos_err = np.linalg.norm(log.position[ok] - log.truth_position[ok], axis=1)
    head_err = wrap_angle(log.heading[ok] - log.truth_heading[ok])
    dl = ~np.isnan(log.delayed_position[:, 0]) & ok
    cons = np.linalg.norm(log.delayed_position[dl] - log.position[dl], axis=1)
    sm = ~np.isnan(log.smoothed_position[:, 0])
    dpos = np.linalg.norm(log.smoothed_position[sm] - log.truth_position[sm], axis=1)
    st = log.solve_times or [0.0]
    return MetricsReport(log.estimator, _rms(pos_err), _rms(head_err), _rms(cons), _rms(dpos),
                         float(np.mean(st)), float(statistics.median(st)), float(max(st)),
                         int(log.dropped), int(ok.sum()), int(dl.sum()))


# ---------------------------------------------------------------------- replay


def _groups(measurements):
    return groupby(measurements, key=lambda m: m.stamp)


class _RealTime:
    """Forward propagation of the newest estimate through one process source."""

    def __init__(self, model, kinds):
        self.model = model
        self.kinds = kinds
        self.values = None
        self.stamp = None
        self.last_sample = None

    def reset(self, stamp, values):
        self.stamp = stamp
        self.values = {n: np.array(v, dtype=float) for n, v in values.items()}

    def sample(self, meas: ProcessMeasurement):
        prev, self.last_sample = self.last_sample, meas.stamp
        if self.values is None or prev is None:
            return
        dt = meas.stamp - max(prev, self.stamp)
        if dt <= 1e-9:
            return
        names = self.model.block_names
        x = np.concatenate([self.values[n] for n in names])
        xe, _, _, _ = self.model.propagate(x, [dt], [meas.payload], {})
        i = 0
        for n in names:
            k = self.kinds[n].ambient_dim
            self.values[n] = self.kinds[n].project(xe[i:i + k])
            i += k
        self.stamp = meas.stamp


def run_mhe(ds: Dataset, cfg: Optional[SimConfig] = None, setup: Optional[ModelSetup] = None):
    """Replay ``ds`` through the engine; returns ``(log, metrics, engine)``.

    ``cfg`` overrides the estimator settings of the dataset's config.
    """
    if cfg is not None:
        ds = Dataset(ds.config.replace(estimator=cfg.to_dict()["estimator"]), ds.stamps, ds.truth,
                     ds.measurements, ds.landmarks, ds.statics_truth)
    setup = setup or model_setup(ds)
    engine = Engine(engine_config(ds, setup))
    pre = setup.prefix
    log = TrajectoryLog.empty("mhe", ds, pre)
    rt = _RealTime(setup.process_models[setup.propagation_source], setup.state_blocks)
    rate = ds.config.rates.process
    delayed = {}
    n_marg = 0
    for step, (stamp, group) in enumerate(_groups(ds.measurements)):
        k = int(round(stamp * rate))
        spawned = False
        try:
            for m in group:
                if isinstance(m, ProcessMeasurement):
                    engine.ingest(m)
                    if m.source == setup.propagation_source:
                        rt.sample(m)
                        if rt.values is not None:
                            log.position[k] = rt.values[pre + "position"]
                            log.heading[k] = rt.values[pre + "heading"][0]
                else:
                    engine.ingest(m)
                    spawned |= m.source in setup.spawn_sources
            if spawned and engine.states and engine.states[-1].stamp == stamp:
                out = engine.optimize_window()
                log.solve_times.append(out.metadata["solve_time"])
                rt.reset(stamp, out.values)
                log.delayed_position[k] = out.values[pre + "position"]
                log.delayed_heading[k] = out.values[pre + "heading"][0]
                if rt.last_sample is None or rt.last_sample < stamp:
                    rt.last_sample = stamp
                for t, vals in engine.marginalized[n_marg:]:
                    delayed[t] = vals
                n_marg = len(engine.marginalized)
        except Exception as exc:
            raise EstimatorError(f"MHE failed at step {step} (t={stamp}): {exc}", step, stamp) from exc
    for s in engine.states:
        delayed.setdefault(s.stamp, s.values())
    for t, vals in delayed.items():
        log.smoothed_position[int(round(t * rate))] = vals[pre + "position"]
    log.dropped = engine.counters.dropped
    return log, compute_metrics(log), engine


def run_iekf(ds: Dataset, cfg: Optional[SimConfig] = None, setup: Optional[ModelSetup] = None,
             max_iterations: int = 5):
    """Replay ``ds`` through the IEKF; returns ``(log, metrics, filter)``."""
    if cfg is not None:
        ds = Dataset(ds.config.replace(estimator=cfg.to_dict()["estimator"]), ds.stamps, ds.truth,
                     ds.measurements, ds.landmarks, ds.statics_truth)
    setup = setup or model_setup(ds)
    filt = IEKF(setup.state_blocks, setup.update_models, setup.process_models, setup.statics,
                max_iterations=max_iterations)
    pre = setup.prefix
    log = TrajectoryLog.empty("iekf", ds, pre)
    rate = ds.config.rates.process
    sigma = np.concatenate([setup.initial_sigma[n] for n in setup.state_blocks])
    for step, (stamp, group) in enumerate(_groups(ds.measurements)):
        k = int(round(stamp * rate))
        updated = False
        try:
            t0 = time.perf_counter()
            for m in group:
                if isinstance(m, ProcessMeasurement):
                    filt.process(m)
                    if m.source == setup.propagation_source and filt.initialized:
                        log.position[k] = filt.state[pre + "position"].value
                        log.heading[k] = filt.state[pre + "heading"].value[0]
                    continue
                if m.source not in setup.update_models:
                    continue
                if not filt.initialized:
                    if m.source not in setup.spawn_sources:
                        log.dropped += 1
                        continue
                    filt.initialize(stamp, setup.initial_values, np.diag(sigma ** 2))
                filt.update(m)
                updated = True
            if updated:
                log.solve_times.append(time.perf_counter() - t0)
                log.delayed_position[k] = filt.state[pre + "position"].value
                log.delayed_heading[k] = filt.state[pre + "heading"].value[0]
                log.smoothed_position[k] = log.delayed_position[k]
        except ConfigurationError:
            raise
        except Exception as exc:
            raise EstimatorError(f"IEKF failed at step {step} (t={stamp}): {exc}", step, stamp) from exc
    return log, compute_metrics(log), filt
