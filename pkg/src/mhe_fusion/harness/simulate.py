"""Ground truth and noisy sensor streams for the planar benchmarks.

The process grid is ``t_k = k / rates.process``.  Truth is generated so
that the estimator's own discrete models reproduce it exactly from
noise-free inputs: the inertial-style inputs are derived from the
discrete truth, and in the ``arm`` scenario the base is integrated with
the wheel-odometry model itself.  Every residual is therefore zero at the
truth when all noise sigmas are zero.  The one exception is the optional
wheel stream of the ``planar`` scenario: the sinusoidal truth follows the
inertial model, and the midpoint unicycle rule matches its chords only up
to third order in the sample period (about 1e-6 m per camera interval at
the default rates).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .. import kernels
from ..manifold import wrap_angle
from ..models import DiffDriveParams, arm_forward_kinematics, rot
from ..problem import ConfigurationError, ProcessMeasurement, UpdateMeasurement
from .config import SCHEMA_VERSION, SimConfig

SIGMA_FLOOR = 1e-3


@dataclass
class Dataset:
    config: SimConfig
    stamps: np.ndarray
    truth: Dict[str, np.ndarray]
    measurements: List = field(default_factory=list)
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    statics_truth: Dict[str, list] = field(default_factory=dict)

    @property
    def prefixes(self):
        return ("base_", "ee_") if self.config.scenario == "arm" else ("",)

    def truth_at(self, stamp, prefix=""):
        k = int(round(stamp * self.config.rates.process))
        return {n: self.truth[prefix + n][k] for n in ("position", "heading", "velocity")
                if prefix + n in self.truth}

    def counts(self):
        out: Dict[str, int] = {}
        for m in self.measurements:
            out[m.source] = out.get(m.source, 0) + 1
        return out

    # ------------------------------------------------------------------ persistence

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"schema_version": SCHEMA_VERSION, "config": self.config.to_dict(),
                "landmarks": self.landmarks.tolist(), "statics_truth": self.statics_truth}
        (d / "meta.json").write_text(json.dumps(meta, indent=1))
        np.savez(d / "truth.npz", stamps=self.stamps, **self.truth)
        with open(d / "measurements.ndjson", "w") as fh:
            for m in self.measurements:
                rec = {"source": m.source, "stamp": m.stamp, "payload": m.payload.tolist()}
                if isinstance(m, UpdateMeasurement):
                    rec["weight_sqrt"] = m.weight_sqrt.tolist()
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, directory) -> "Dataset":
        d = Path(directory)
        try:
            meta = json.loads((d / "meta.json").read_text())
            arrays = np.load(d / "truth.npz")
            lines = (d / "measurements.ndjson").read_text().splitlines()
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"cannot read dataset in {d}: {exc}") from None
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"dataset schema {meta.get('schema_version')} is not supported")
        meas = []
        for line in lines:
            r = json.loads(line)
            if "weight_sqrt" in r:
                meas.append(UpdateMeasurement(r["source"], r["stamp"], r["payload"], r["weight_sqrt"]))
            else:
                meas.append(ProcessMeasurement(r["source"], r["stamp"], r["payload"]))
        truth = {k: arrays[k] for k in arrays.files if k != "stamps"}
        return cls(SimConfig.from_dict(meta["config"]), arrays["stamps"], truth, meas,
                   np.array(meta["landmarks"], dtype=float).reshape(-1, 3), meta["statics_truth"])


# ---------------------------------------------------------------------- truth


def _curve(cfg: SimConfig, t):
    tr = cfg.trajectory
    A, f, ph, c = (np.asarray(v, dtype=float) for v in (tr.amplitude, tr.frequency, tr.phase, tr.center))
    arg = 2 * math.pi * f[None, :] * t[:, None] + ph[None, :]
    p = c + A * np.sin(arg)
    dp = A * 2 * math.pi * f * np.cos(arg)
    speed = np.linalg.norm(dp, axis=1)
    if speed.min() < 1e-3:
        k = int(np.argmin(speed))
        raise ConfigurationError(f"trajectory speed vanishes near t={t[k]:.3f}; heading is undefined")
    return p, np.unwrap(np.arctan2(dp[:, 1], dp[:, 0]))


def _inertial_inputs(P, psi, dt):
    """Inputs ``[yaw_rate, ax, ay]`` that make the discrete inertial model hit ``P, psi`` exactly.

    ``psi`` must be unwrapped.  Returns ``(velocity, inputs)``; ``inputs[0]``
    is unused (the first sample covers nothing).
    """
    V = np.empty_like(P)
    V[1:] = (P[1:] - P[:-1]) / dt
    V[0] = V[1]
    inputs = np.zeros((len(P), 3))
    inputs[1:, 0] = (psi[1:] - psi[:-1]) / dt
    dv = (V[1:] - V[:-1]) / dt
    c, s = np.cos(psi[1:]), np.sin(psi[1:])
    inputs[1:, 1] = c * dv[:, 0] + s * dv[:, 1]
    inputs[1:, 2] = -s * dv[:, 0] + c * dv[:, 1]
    return V, inputs


def _landmarks(cfg: SimConfig, rng):
    tr, lm = cfg.trajectory, cfg.landmarks
    c, A = np.asarray(tr.center, float), np.abs(np.asarray(tr.amplitude, float))
    lo, hi = c - A - lm.margin, c + A + lm.margin
    xy = rng.uniform(lo, hi, size=(lm.count, 2))
    h = rng.uniform(-math.pi, math.pi, size=lm.count)
    return np.column_stack([xy, h])


def _blacked_out(cfg: SimConfig, t):
    return any(a <= t < b for a, b in cfg.blackouts)


def _relative_pose(p, psi, landmark, offset=(0.0, 0.0)):
    R = rot(psi)
    ps = p + R @ np.asarray(offset, dtype=float)
    rel = R.T @ (landmark[:2] - ps)
    return np.array([rel[0], rel[1], float(wrap_angle(landmark[2] - psi))])


def _camera(cfg, rng, source, stamp, p, psi, landmarks, offset=(0.0, 0.0)):
    nz = cfg.noise
    d = np.linalg.norm(landmarks[:, :2] - p, axis=1)
    order = [int(i) for i in np.argsort(d, kind="stable") if d[i] <= cfg.landmarks.range]
    sig = np.array([nz.camera_position, nz.camera_position, nz.camera_heading])
    W = np.diag(1.0 / np.maximum(sig, SIGMA_FLOOR))
    out = []
    for i in order[:cfg.landmarks.max_visible]:
        rel = _relative_pose(p, psi, landmarks[i], offset)
        outlier = rng.random() < cfg.outlier_fraction
        noise = rng.normal(size=3) * sig * (100.0 if outlier else 1.0)
        rel = rel + noise
        rel[2] = float(wrap_angle(rel[2]))
        out.append(UpdateMeasurement(source, stamp, np.concatenate([[i], rel]), W))
    return out


def _wheel_speeds(speed, yaw_rate, params: DiffDriveParams):
    r, w = params.wheel_radius, params.track_width
    return np.column_stack([(speed - 0.5 * w * yaw_rate) / r, (speed + 0.5 * w * yaw_rate) / r])


def _stamps(cfg: SimConfig):
    rp = cfg.rates.process
    K = int(round(cfg.trajectory.duration * rp))
    return np.array([round(k / rp, 9) for k in range(K + 1)])


def simulate(cfg: SimConfig) -> Dataset:
    """Generate a dataset; deterministic for a given config (including seed)."""
    cfg.validate()
    if cfg.scenario == "arm":
        return _simulate_arm(cfg)
    return _simulate_planar(cfg)


def _simulate_planar(cfg: SimConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    stamps = _stamps(cfg)
    dt = 1.0 / cfg.rates.process
    P, psi = _curve(cfg, stamps)
    V, inputs = _inertial_inputs(P, psi, dt)
    landmarks = _landmarks(cfg, rng)
    nz = cfg.noise
    ddp = DiffDriveParams()
    speed = np.linalg.norm(V, axis=1)
    wheels = _wheel_speeds(speed, inputs[:, 0], ddp)

    process, updates = [], []
    imu_noise = rng.normal(size=inputs.shape) * np.array([nz.gyro, nz.accel, nz.accel])
    wheel_noise = rng.normal(size=wheels.shape) * nz.wheel
    for k, t in enumerate(stamps):
        process.append(ProcessMeasurement("imu", t, inputs[k] + (imu_noise[k] if k else 0.0)))
        if cfg.sensors.wheels:
            process.append(ProcessMeasurement("wheels", t, wheels[k] + (wheel_noise[k] if k else 0.0)))
    cam_every = int(round(cfg.rates.process / cfg.rates.camera))
    rng_cam2 = np.random.default_rng([cfg.seed, 2])  # keeps the other streams unchanged
    cam2_every = int(round(cfg.rates.process / cfg.rates.camera2))
    gps_every = int(round(cfg.rates.process / cfg.rates.gps))
    W_gps = np.eye(2) / max(nz.gps, SIGMA_FLOOR)
    for k in range(1, len(stamps)):
        t = stamps[k]
        if cfg.sensors.camera and k % cam_every == 0 and not _blacked_out(cfg, t):
            updates += _camera(cfg, rng, "camera", t, P[k], psi[k], landmarks)
        if cfg.sensors.camera2 and k % cam2_every == 0:
            updates += _camera(cfg, rng_cam2, "camera2", t, P[k], psi[k], landmarks,
                               cfg.landmarks.camera2_offset)
        if cfg.sensors.gps and k % gps_every == 0:
            updates.append(UpdateMeasurement("gps", t, P[k] + rng.normal(size=2) * nz.gps, W_gps))
    truth = {"position": P, "heading": wrap_angle(psi), "velocity": V}
    return Dataset(cfg, stamps, truth, _interleave(process, updates), landmarks, {})


def _simulate_arm(cfg: SimConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    stamps = _stamps(cfg)
    dt = 1.0 / cfg.rates.process
    P, psi = _curve(cfg, stamps)
    ddp = DiffDriveParams()
    speed = np.zeros(len(stamps))
    yaw = np.zeros(len(stamps))
    speed[1:] = np.linalg.norm(P[1:] - P[:-1], axis=1) / dt
    yaw[1:] = (psi[1:] - psi[:-1]) / dt
    wheels = _wheel_speeds(speed, yaw, ddp)
    # the base follows the wheel-odometry model exactly
    base = np.zeros((len(stamps), 3))
    base[0] = [P[0, 0], P[0, 1], psi[0]]
    for k in range(1, len(stamps)):
        base[k], _, _ = kernels.diffdrive_chain(base[k - 1], wheels[k:k + 1], np.array([dt]),
                                                ddp.wheel_radius, ddp.track_width, np.zeros(3),
                                                1.0, 1.0, 1.0)
    arm = cfg.arm
    links = np.asarray(arm.links, dtype=float)
    q = np.column_stack([0.6 * np.sin(2 * math.pi * 0.13 * stamps),
                         1.0 + 0.7 * np.sin(2 * math.pi * 0.21 * stamps + 0.5)])
    ee_p = np.zeros((len(stamps), 2))
    ee_psi = np.zeros(len(stamps))
    for k in range(len(stamps)):
        ee_p[k], ee_psi[k], _, _ = arm_forward_kinematics(base[k, :2], base[k, 2], q[k], links)
    ee_psi = np.unwrap(ee_psi)
    ee_v, inputs = _inertial_inputs(ee_p, ee_psi, dt)
    landmarks = _landmarks(cfg, rng)
    nz = cfg.noise
    offset = np.asarray(arm.camera_offset, dtype=float)

    process, updates = [], []
    imu_noise = rng.normal(size=inputs.shape) * np.array([nz.gyro, nz.accel, nz.accel])
    wheel_noise = rng.normal(size=wheels.shape) * nz.wheel
    for k, t in enumerate(stamps):
        process.append(ProcessMeasurement("imu", t, inputs[k] + (imu_noise[k] if k else 0.0)))
        process.append(ProcessMeasurement("wheels", t, wheels[k] + (wheel_noise[k] if k else 0.0)))
    cam_every = int(round(cfg.rates.process / cfg.rates.camera))
    bias = np.array([0.0, arm.joint_bias])
    sp = max(math.sqrt(2.0) * nz.joint * float(links.sum()), 1e-4)
    sh = max(math.sqrt(2.0) * nz.joint, 1e-4)
    W_arm = np.diag(1.0 / np.array([sp, sp, sh]))
    for k in range(cam_every, len(stamps), cam_every):
        t = stamps[k]
        if not _blacked_out(cfg, t):
            updates += _camera(cfg, rng, "camera", t, base[k, :2], base[k, 2], landmarks, offset)
            updates += _camera(cfg, rng, "ee_camera", t, ee_p[k], ee_psi[k], landmarks)
        q_meas = q[k] - bias + rng.normal(size=2) * nz.joint
        updates.append(UpdateMeasurement("arm", t, q_meas, W_arm))
    truth = {"base_position": base[:, :2], "base_heading": wrap_angle(base[:, 2]),
             "ee_position": ee_p, "ee_heading": wrap_angle(ee_psi), "ee_velocity": ee_v,
             "joint_angles": q}
    statics = {"camera_offset": offset.tolist(), "joint1_bias": [arm.joint_bias],
               "arm_links": links.tolist()}
    return Dataset(cfg, stamps, truth, _interleave(process, updates), landmarks, statics)


def _interleave(process, updates):
    """Merge by stamp; at equal stamps process samples come first."""
    tagged = [(m.stamp, 0, i, m) for i, m in enumerate(process)]
    tagged += [(m.stamp, 1, i, m) for i, m in enumerate(updates)]
    tagged.sort(key=lambda x: x[:3])
    return [m for *_, m in tagged]
