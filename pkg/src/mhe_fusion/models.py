"""Measurement models for planar robots, plus linear models for test fixtures.

Planar poses are stored as two blocks, ``<prefix>position`` (Euclidean 2)
and ``<prefix>heading`` (Angle).  Tangent and ambient coordinates coincide
for both, so Jacobians below are plain derivatives.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .manifold import wrap_angle
from .problem import (ConfigurationError, ProcessModel, State, UpdateMeasurement, UpdateModel,
                      lookup_static)

SLIP_THRESHOLD = 1e-3


def rot(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def drot(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[-s, -c], [c, -s]])


@dataclass
class PlanarPose:
    position: np.ndarray
    heading: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(2)
        self.heading = float(wrap_angle(self.heading))

    def compose(self, other: "PlanarPose") -> "PlanarPose":
        return PlanarPose(self.position + rot(self.heading) @ other.position,
                          self.heading + other.heading)

    def inverse(self) -> "PlanarPose":
        return PlanarPose(-rot(self.heading).T @ self.position, -self.heading)


# --------------------------------------------------------------------------
# process models


@dataclass
class DiffDriveParams:
    wheel_radius: float = 0.1
    track_width: float = 0.5
    slip_noise_scale_moving: float = 100.0
    slip_noise_scale_stationary: float = 1.0
    position_var: float = 1e-6   # per second, stationary
    heading_var: float = 1e-6

    def __post_init__(self):
        if not (self.wheel_radius > 0 and self.track_width > 0):
            raise ValueError("wheel radius and track width must be positive")
        if self.slip_noise_scale_moving < self.slip_noise_scale_stationary:
            raise ValueError("moving slip scale must be >= stationary scale")


class DiffDriveProcess(ProcessModel):
    """Wheel-speed odometry for a differential-drive base.

    Payload per sample: ``[omega_left, omega_right]`` in rad/s.  Process
    noise is additive on the pose and much larger while the wheels turn.
    """

    def __init__(self, params: DiffDriveParams = None, prefix: str = ""):
        self.params = params or DiffDriveParams()
        self.block_names = (prefix + "position", prefix + "heading")
        self.static_names = ()

    def _base_var(self):
        p = self.params
        return np.array([p.position_var, p.position_var, p.heading_var])

    def propagate(self, x, dts, payloads, statics):
        p = self.params
        wheels = np.asarray(payloads, dtype=float).reshape(-1, 2)
        xe, phi, P = kernels.diffdrive_chain(x, wheels, np.asarray(dts, dtype=float), p.wheel_radius,
                                             p.track_width, self._base_var(), p.slip_noise_scale_moving,
                                             p.slip_noise_scale_stationary, SLIP_THRESHOLD)
        xe[2] = wrap_angle(xe[2])
        return xe, phi, np.zeros((3, 0)), P

    def step(self, x, payload, dt, statics):
        xe, F, _, P = self.propagate(x, [dt], [payload], statics)
        return xe, F, np.eye(3), P, np.zeros((3, 0))


def diffdrive_propagate(pose: PlanarPose, wheel_speeds, stamps, params: DiffDriveParams,
                        t0: Optional[float] = None):
    """Integrate wheel speeds from ``pose``; returns ``(pose, covariance)``.

    ``wheel_speeds[k]`` is held over ``(stamps[k-1], stamps[k]]``; the first
    interval starts at ``t0`` (default: the first stamp, i.e. it is skipped).
    """
    stamps = np.asarray(stamps, dtype=float)
    start = stamps[0] if t0 is None else t0
    dts = np.diff(np.concatenate([[start], stamps]))
    keep = dts > 0
    model = DiffDriveProcess(params)
    x0 = np.concatenate([pose.position, [pose.heading]])
    x, _, _, P = model.propagate(x0, dts[keep], np.asarray(wheel_speeds, dtype=float)[keep], {})
    return PlanarPose(x[:2], x[2]), P


@dataclass
class ConstVelNoise:
    gyro_var: float = 1e-4         # per sample, rad^2/s^2
    accel_var: float = 1e-2        # per sample, m^2/s^4
    position_var: float = 1e-8     # additive, per second
    heading_var: float = 1e-8
    velocity_var: float = 1e-6

    def input_var(self):
        return np.array([self.gyro_var, self.accel_var, self.accel_var])

    def additive_var(self):
        return np.array([self.position_var, self.position_var, self.heading_var,
                         self.velocity_var, self.velocity_var])


class ConstVelProcess(ProcessModel):
    """Planar inertial-style integration on ``[position, heading, velocity]``.

    Payload per sample: ``[yaw_rate, ax, ay]`` with the acceleration in the
    body frame.  Integration order is heading, then velocity, then position.
    """

    def __init__(self, noise: ConstVelNoise = None, prefix: str = ""):
        self.noise = noise or ConstVelNoise()
        self.block_names = (prefix + "position", prefix + "heading", prefix + "velocity")
        self.static_names = ()

    def propagate(self, x, dts, payloads, statics):
        inputs = np.asarray(payloads, dtype=float).reshape(-1, 3)
        xe, phi, P = kernels.constvel_chain(x, inputs, np.asarray(dts, dtype=float),
                                            self.noise.input_var(), self.noise.additive_var())
        xe[2] = wrap_angle(xe[2])
        return xe, phi, np.zeros((5, 0)), P

    def step(self, x, payload, dt, statics):
        xe, F, _, P = self.propagate(x, [dt], [payload], statics)
        return xe, F, np.eye(5), P, np.zeros((5, 0))


def constvel_propagate(position, heading, velocity, dt, yaw_rate=0.0, accel=(0.0, 0.0), substeps=1):
    """Propagate a planar pose+velocity over ``dt`` with constant inputs."""
    h = dt / substeps
    x0 = np.concatenate([np.asarray(position, float), [heading], np.asarray(velocity, float)])
    inputs = np.tile([yaw_rate, accel[0], accel[1]], (substeps, 1))
    x, _, _ = kernels.constvel_chain(x0, inputs, np.full(substeps, h), np.zeros(3), np.zeros(5))
    return x[:2], float(wrap_angle(x[2])), x[3:5]


class LinearProcess(ProcessModel):
    """``x' = A(dt) x + B(dt) u`` on one Euclidean block, noise ``G(dt) Q G(dt)^T``."""

    def __init__(self, block: str, transition, noise_cov):
        self.block_names = (block,)
        self.static_names = ()
        self.transition = transition
        self.noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))

    def step(self, x, payload, dt, statics):
        A, B, G = self.transition(dt)
        xn = A @ x + (B @ payload if B.size else 0.0)
        return xn, A, G, self.noise_cov, np.zeros((x.size, 0))


def constant_velocity_1d(block="x", accel_var=1.0):
    """State ``[p, v]``, input acceleration, noise on the acceleration input."""
    def transition(dt):
        A = np.array([[1.0, dt], [0.0, 1.0]])
        B = np.array([[0.5 * dt * dt], [dt]])
        return A, B, B
    return LinearProcess(block, transition, [[accel_var]])


def random_walk(block="x", dim=1, var=1.0):
    """``x' = x + u dt`` with additive per-sample noise of variance ``var``."""
    def transition(dt):
        return np.eye(dim), np.eye(dim) * dt, np.eye(dim)
    return LinearProcess(block, transition, np.eye(dim) * var)


# --------------------------------------------------------------------------
# update models


class PositionUpdate(UpdateModel):
    """Direct measurement of a Euclidean block (GNSS-like)."""

    def __init__(self, block="position", dim=2):
        self.block = block
        self.dim = dim

    def blocks(self, state, statics, meas):
        return [state[self.block]]

    def error(self, state, statics, meas):
        return meas.payload - state[self.block].value, [-np.eye(self.dim)]

    def seed(self, meas, statics):
        return {self.block: meas.payload.copy()}


class LinearUpdate(UpdateModel):
    """``u = C x`` on a single Euclidean block."""

    def __init__(self, block, C):
        self.block = block
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        self.dim = self.C.shape[0]

    def blocks(self, state, statics, meas):
        return [state[self.block]]

    def error(self, state, statics, meas):
        return meas.payload - self.C @ state[self.block].value, [-self.C]


class LandmarkPoseUpdate(UpdateModel):
    """Relative pose of a mapped planar landmark seen from a body-mounted sensor.

    Payload ``[landmark_id, dx, dy, dtheta]``: the landmark pose expressed in
    the sensor frame.  The landmark pose lives in statics
    ``landmark<id>.position`` / ``landmark<id>.heading``; the sensor's
    translation in the body frame is the static ``offset`` (optional).
    """

    dim = 3

    def __init__(self, prefix: str = "", offset: Optional[str] = None, landmark_prefix="landmark"):
        self.pos = prefix + "position"
        self.head = prefix + "heading"
        self.offset = offset
        self.landmark_prefix = landmark_prefix

    def landmark_names(self, meas):
        lid = int(round(meas.payload[0]))
        base = f"{self.landmark_prefix}{lid}"
        return base + ".position", base + ".heading"

    def blocks(self, state, statics, meas):
        lp, lh = self.landmark_names(meas)
        out = [state[self.pos], state[self.head], lookup_static(statics, lp), lookup_static(statics, lh)]
        if self.offset is not None:
            out.append(lookup_static(statics, self.offset))
        return out

    def predict(self, p, psi, lp, lpsi, o):
        R = rot(psi)
        ps = p + R @ o
        rel_p = R.T @ (lp - ps)
        rel_h = float(wrap_angle(lpsi - psi))
        return rel_p, rel_h

    def error(self, state, statics, meas):
        lp_name, lh_name = self.landmark_names(meas)
        p = state[self.pos].value
        psi = float(state[self.head].value[0])
        lp = lookup_static(statics, lp_name).value
        lpsi = float(lookup_static(statics, lh_name).value[0])
        o = lookup_static(statics, self.offset).value if self.offset is not None else np.zeros(2)
        R = rot(psi)
        d = lp - p - R @ o
        rel_p = R.T @ d
        rel_h = float(wrap_angle(lpsi - psi))
        u = meas.payload[1:4]
        f = np.concatenate([u[:2] - rel_p, [float(wrap_angle(u[2] - rel_h))]])
        # derivatives of rel, then f = u - rel
        dRT = drot(psi).T
        d_p = np.zeros((3, 2))
        d_p[:2] = -R.T
        d_psi = np.zeros((3, 1))
        d_psi[:2, 0] = dRT @ d - R.T @ (drot(psi) @ o)
        d_psi[2, 0] = -1.0
        d_lp = np.zeros((3, 2))
        d_lp[:2] = R.T
        d_lh = np.zeros((3, 1))
        d_lh[2, 0] = 1.0
        jacs = [-d_p, -d_psi, -d_lp, -d_lh]
        if self.offset is not None:
            d_o = np.zeros((3, 2))
            d_o[:2] = -np.eye(2)
            jacs.append(-d_o)
        return f, jacs

    def seed(self, meas, statics):
        lp_name, lh_name = self.landmark_names(meas)
        try:
            lp = statics[lp_name].value
            lpsi = float(statics[lh_name].value[0])
        except KeyError:
            return None
        o = statics[self.offset].value if self.offset is not None and self.offset in statics else np.zeros(2)
        u = meas.payload[1:4]
        psi = float(wrap_angle(lpsi - u[2]))
        R = rot(psi)
        ps = lp - R @ u[:2]
        return {self.pos: ps - R @ o, self.head: np.array([psi])}


def arm_forward_kinematics(base_p, base_psi, angles, lengths):
    """Planar serial arm; returns ``(ee_position, ee_heading, d_pos/d_angles, d_pos/d_lengths)``."""
    theta = float(base_psi)
    p = np.array(base_p, dtype=float)
    n = len(angles)
    thetas = []
    for q, length in zip(angles, lengths):
        theta += q
        thetas.append(theta)
        p = p + length * np.array([math.cos(theta), math.sin(theta)])
    # d p / d theta_j accumulates every link at or after joint j
    d_angles = np.zeros((2, n))
    for j in range(n):
        for k in range(j, n):
            d_angles[:, j] += lengths[k] * np.array([-math.sin(thetas[k]), math.cos(thetas[k])])
    d_lengths = np.array([[math.cos(t) for t in thetas], [math.sin(t) for t in thetas]])
    return p, theta, d_angles, d_lengths


class JointOdometryUpdate(UpdateModel):
    """Relates base and end-effector poses through a planar serial arm.

    Payload: measured joint angles.  Statics: ``links`` (Euclidean, one
    length per link) and one optional bias block (Euclidean 1) per joint,
    named in ``bias_names`` (``None`` for joints without a bias).
    """

    dim = 3

    def __init__(self, base_prefix="base_", ee_prefix="ee_", links="arm_links",
                 bias_names: Sequence[Optional[str]] = (None, "joint1_bias")):
        self.base_pos, self.base_head = base_prefix + "position", base_prefix + "heading"
        self.ee_pos, self.ee_head = ee_prefix + "position", ee_prefix + "heading"
        self.links = links
        self.bias_names = list(bias_names)

    def blocks(self, state, statics, meas):
        out = [state[self.base_pos], state[self.base_head], state[self.ee_pos], state[self.ee_head],
               lookup_static(statics, self.links)]
        out += [lookup_static(statics, b) for b in self.bias_names if b is not None]
        return out

    def _angles(self, statics, meas):
        q = np.array(meas.payload, dtype=float)
        if q.size != len(self.bias_names):
            raise ConfigurationError(f"expected {len(self.bias_names)} joint angles, got {q.size}")
        for j, b in enumerate(self.bias_names):
            if b is not None:
                q[j] += lookup_static(statics, b).value[0]
        return q

    def error(self, state, statics, meas):
        q = self._angles(statics, meas)
        lengths = lookup_static(statics, self.links).value
        bp = state[self.base_pos].value
        bpsi = float(state[self.base_head].value[0])
        fp, fpsi, d_ang, d_len = arm_forward_kinematics(bp, bpsi, q, lengths)
        ep = state[self.ee_pos].value
        epsi = float(state[self.ee_head].value[0])
        f = np.concatenate([ep - fp, [float(wrap_angle(epsi - fpsi))]])
        # base heading shifts every link angle, same as the first joint
        d_bpsi = np.concatenate([d_ang[:, 0], [1.0]])
        J_bp = np.zeros((3, 2))
        J_bp[:2] = -np.eye(2)
        J_bh = -d_bpsi.reshape(3, 1)
        J_ep = np.zeros((3, 2))
        J_ep[:2] = np.eye(2)
        J_eh = np.array([[0.0], [0.0], [1.0]])
        J_len = np.zeros((3, lengths.size))
        J_len[:2] = -d_len
        jacs = [J_bp, J_bh, J_ep, J_eh, J_len]
        for j, b in enumerate(self.bias_names):
            if b is not None:
                col = np.concatenate([d_ang[:, j], [1.0]])
                jacs.append(-col.reshape(3, 1))
        return f, jacs


def load_model_params(section: Dict) -> Dict[str, object]:
    """Build model parameter objects from a JSON/TOML config section.

    Recognized keys: ``diffdrive`` (``DiffDriveParams`` fields) and
    ``constvel`` (``ConstVelNoise`` fields).
    """
    out = {}
    if "diffdrive" in section:
        out["diffdrive"] = DiffDriveParams(**section["diffdrive"])
    if "constvel" in section:
        out["constvel"] = ConstVelNoise(**section["constvel"])
    unknown = set(section) - {"diffdrive", "constvel"}
    if unknown:
        raise ConfigurationError(f"unknown model sections {sorted(unknown)}")
    return out
