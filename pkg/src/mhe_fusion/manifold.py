"""Parameter-block manifolds and the boxplus / boxminus operators.

All operators broadcast over leading axes, so ``x`` may be a single
ambient vector of shape ``(n,)`` or a stack of shape ``(..., n)``.
Quaternions are stored scalar-first, ``(w, x, y, z)``, and increments
are applied on the left: ``q' = exp(delta) * q``.
"""
from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


class ManifoldError(ValueError):
    """Raised on dimension mismatches between values and increments."""


def wrap_angle(a):
    """Wrap angle(s) into ``(-pi, pi]``."""
    a = np.asarray(a, dtype=float)
    return math.pi - np.mod(math.pi - a, TWO_PI)


class ManifoldKind:
    ambient_dim: int
    tangent_dim: int

    def boxplus(self, x, delta):
        raise NotImplementedError

    def boxminus(self, y, x):
        raise NotImplementedError

    def boxminus_jacobians(self, y, x):
        """Jacobians of ``y [-] x`` w.r.t. tangent increments on ``y`` and ``x``."""
        n = self.tangent_dim
        return np.eye(n), -np.eye(n)

    def project(self, x):
        """Return the closest valid value to ``x``."""
        return np.asarray(x, dtype=float)

    def identity(self):
        return np.zeros(self.ambient_dim)

    def _check(self, x, delta=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.ambient_dim,):
            raise ManifoldError(
                f"{self!r}: value has shape {x.shape}, expected (..., {self.ambient_dim})")
        if delta is not None:
            delta = np.asarray(delta, dtype=float)
            if delta.shape[-1:] != (self.tangent_dim,):
                raise ManifoldError(
                    f"{self!r}: increment has shape {delta.shape}, "
                    f"expected (..., {self.tangent_dim})")
        return x, delta

    def to_json(self):
        return {"type": type(self).__name__}

    @staticmethod
    def from_json(d):
        t = d["type"]
        if t == "Euclidean":
            return Euclidean(d["dim"])
        if t == "UnitQuaternion":
            return UnitQuaternion()
        if t == "Angle":
            return Angle()
        raise ManifoldError(f"unknown manifold type {t!r}")

    def __eq__(self, other):
        return type(self) is type(other) and self.ambient_dim == other.ambient_dim

    def __hash__(self):
        return hash((type(self).__name__, self.ambient_dim))


class Euclidean(ManifoldKind):
    def __init__(self, dim: int):
        if dim < 1:
            raise ManifoldError("Euclidean dimension must be >= 1")
        self.ambient_dim = self.tangent_dim = int(dim)

    def boxplus(self, x, delta):
        x, delta = self._check(x, delta)
        return x + delta

    def boxminus(self, y, x):
        y, _ = self._check(y)
        x, _ = self._check(x)
        return y - x

    def to_json(self):
        return {"type": "Euclidean", "dim": self.ambient_dim}

    def __repr__(self):
        return f"Euclidean({self.ambient_dim})"


class Angle(ManifoldKind):
    """Scalar angle, wrapped to ``(-pi, pi]``."""

    ambient_dim = 1
    tangent_dim = 1

    def boxplus(self, x, delta):
        x, delta = self._check(x, delta)
        return wrap_angle(x + delta)

    def boxminus(self, y, x):
        y, _ = self._check(y)
        x, _ = self._check(x)
        return wrap_angle(y - x)

    def project(self, x):
        return wrap_angle(x)

    def __repr__(self):
        return "Angle()"


def quat_multiply(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.array(q, dtype=float)
    q[..., 1:] *= -1.0
    return q


def quat_exp(delta):
    """Rotation vector -> unit quaternion."""
    delta = np.asarray(delta, dtype=float)
    theta = np.linalg.norm(delta, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(t/2)/t, with its Taylor expansion near zero
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * delta], axis=-1)


def quat_log(q):
    """Unit quaternion -> rotation vector, choosing the shortest rotation."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(vn, w)
    small = vn < 1e-12
    safe = np.where(small, 1.0, vn)
    k = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), theta / safe)
    return k * v


def quat_to_rotation(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_left_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    S = _skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * S + S @ S / 12.0
    half = 0.5 * theta
    c = (1.0 - half / math.tan(half)) / theta ** 2
    return np.eye(3) - 0.5 * S + c * S @ S


class UnitQuaternion(ManifoldKind):
    ambient_dim = 4
    tangent_dim = 3

    def identity(self):
        return np.array([1.0, 0.0, 0.0, 0.0])

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x / np.linalg.norm(x, axis=-1, keepdims=True)

    def boxplus(self, x, delta):
        x, delta = self._check(x, delta)
        return self.project(quat_multiply(quat_exp(delta), x))

    def boxminus(self, y, x):
        y, _ = self._check(y)
        x, _ = self._check(x)
        return quat_log(quat_multiply(y, quat_conjugate(x)))

    def boxminus_jacobians(self, y, x):
        phi = self.boxminus(y, x)
        # left perturbation of y: log(exp(d) exp(phi)) ~ phi + Jl^-1 d
        # left perturbation of x: log(exp(phi) exp(-d)) ~ phi - Jr^-1 d, Jr(phi) = Jl(-phi)
        return so3_left_jacobian_inv(phi), -so3_left_jacobian_inv(-phi)

    def __repr__(self):
        return "UnitQuaternion()"


def boxplus(kind: ManifoldKind, x, delta):
    return kind.boxplus(x, delta)


def boxminus(kind: ManifoldKind, y, x):
    return kind.boxminus(y, x)


class ParameterBlock:
    """A single estimated quantity living on a manifold.

    Inactive blocks are held constant by the solver: they still enter
    residual evaluation but receive no Jacobian columns and no increments.
    """

    __slots__ = ("kind", "value", "active", "name")

    def __init__(self, kind: ManifoldKind, value=None, active: bool = True, name: str = ""):
        self.kind = kind
        if value is None:
            value = kind.identity()
        value = np.array(value, dtype=float).reshape(kind.ambient_dim)
        self.value = kind.project(value)
        self.active = bool(active)
        self.name = name

    @property
    def tangent_dim(self) -> int:
        return self.kind.tangent_dim

    def boxplus_(self, delta):
        if not self.active:
            raise ManifoldError(f"block {self.name!r} is inactive and cannot be incremented")
        self.value = self.kind.boxplus(self.value, delta)

    def copy(self) -> "ParameterBlock":
        return ParameterBlock(self.kind, self.value.copy(), self.active, self.name)

    def __repr__(self):
        flag = "" if self.active else ", const"
        return f"ParameterBlock({self.name!r}, {self.kind!r}, {np.round(self.value, 6).tolist()}{flag})"
