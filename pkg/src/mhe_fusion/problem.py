"""States, measurements, measurement-model interfaces and residual terms.

Residuals are stored pre-weighted: a residual term returns
``e = W^{1/2} f`` together with the tangent-space Jacobians of ``e`` so
that the normal equations can be assembled without further weighting.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .manifold import ParameterBlock


class ConfigurationError(ValueError):
    """A model refers to a parameter block that does not exist."""


class AssignmentError(ValueError):
    """A process chain does not match the states it links."""


class ObservabilityError(np.linalg.LinAlgError):
    """A covariance or information matrix is singular.

    ``directions`` lists the offending coordinate indices (or block labels).
    """

    def __init__(self, message, directions=()):
        super().__init__(message)
        self.directions = list(directions)


@dataclass
class UpdateMeasurement:
    source: str
    stamp: float
    payload: np.ndarray
    weight_sqrt: np.ndarray

    def __post_init__(self):
        self.payload = np.atleast_1d(np.asarray(self.payload, dtype=float))
        self.weight_sqrt = np.atleast_2d(np.asarray(self.weight_sqrt, dtype=float))
        w = self.weight_sqrt
        if w.shape[0] != w.shape[1] or np.any(np.tril(w, -1) != 0.0) or np.any(np.diag(w) < 0.0):
            raise ValueError("weight_sqrt must be square upper-triangular with a non-negative diagonal")


@dataclass
class ProcessMeasurement:
    """An input sample, held over the interval ending at ``stamp``."""

    source: str
    stamp: float
    payload: np.ndarray

    def __post_init__(self):
        self.payload = np.atleast_1d(np.asarray(self.payload, dtype=float))


SEGMENT_EPS = 1e-9


def chain_segments(buffer: Sequence[ProcessMeasurement], t0: float, t1: float):
    """Cut ``(t0, t1]`` out of a time-ordered sample buffer.

    Sample ``k`` covers ``(stamp[k-1], stamp[k]]``; the first sample of the
    buffer covers nothing.  Returns ``(measurements, dts, payloads, covered)``
    where ``covered`` is the right end of the covered part of the interval.
    """
    meas, dts, payloads = [], [], []
    covered = t0
    for k in range(1, len(buffer)):
        lo = max(buffer[k - 1].stamp, t0)
        hi = min(buffer[k].stamp, t1)
        if buffer[k].stamp <= t0:
            continue
        if buffer[k - 1].stamp >= t1:
            break
        dt = hi - lo
        if dt > SEGMENT_EPS:
            meas.append(buffer[k])
            dts.append(dt)
            payloads.append(buffer[k].payload)
            covered = hi
    return meas, np.array(dts), payloads, covered


@dataclass
class ProcessChain:
    source: str
    t_start: float
    t_end: float
    measurements: List[ProcessMeasurement]
    dts: np.ndarray
    payloads: List[np.ndarray]
    weight_sqrt: Optional[np.ndarray] = None

    @classmethod
    def from_buffer(cls, source, buffer, t_start, t_end):
        meas, dts, payloads, covered = chain_segments(buffer, t_start, t_end)
        if abs(covered - t_end) > SEGMENT_EPS:
            raise AssignmentError(
                f"process buffer {source!r} covers ({t_start}, {covered}], need ({t_start}, {t_end}]")
        return cls(source, t_start, t_end, meas, dts, payloads)

    def __len__(self):
        return len(self.dts)


@dataclass
class State:
    stamp: float
    blocks: Dict[str, ParameterBlock]
    updates: List[UpdateMeasurement] = field(default_factory=list)
    incoming: Dict[str, ProcessChain] = field(default_factory=dict)

    def __getitem__(self, name) -> ParameterBlock:
        try:
            return self.blocks[name]
        except KeyError:
            raise ConfigurationError(f"state at t={self.stamp} has no block {name!r}") from None

    def values(self, names=None):
        names = self.blocks if names is None else names
        return {n: self.blocks[n].value.copy() for n in names}


def lookup_static(statics, name) -> ParameterBlock:
    try:
        return statics[name]
    except KeyError:
        raise ConfigurationError(f"missing static parameter block {name!r}") from None


class UpdateModel:
    """Relates one state (and optional statics) to an update measurement.

    Subclasses implement :meth:`blocks` and :meth:`error`.  ``error`` returns
    the unweighted tangent-space discrepancy ``u [-] g(x, s)`` and its
    Jacobians with respect to the blocks returned by :meth:`blocks`, in the
    same order.
    """

    dim: int = 0

    def blocks(self, state: State, statics, meas: UpdateMeasurement) -> List[ParameterBlock]:
        raise NotImplementedError

    def error(self, state: State, statics, meas: UpdateMeasurement):
        raise NotImplementedError

    def seed(self, meas: UpdateMeasurement, statics) -> Optional[Dict[str, np.ndarray]]:
        """Optional initial values for a state spawned by ``meas``."""
        return None


class ProcessModel:
    """Propagates a portion of the state through a chain of input samples.

    ``block_names`` selects the portion.  Subclasses implement :meth:`step`
    (one input sample); :meth:`propagate` chains steps and accumulates the
    state transition Jacobian, the Jacobian w.r.t. static blocks and the
    propagated covariance (starting from zero).
    """

    block_names: Tuple[str, ...] = ()
    static_names: Tuple[str, ...] = ()

    def kinds(self, state: State):
        return [state[n].kind for n in self.block_names]

    def step(self, x, payload, dt, statics):
        """Return ``(x_next, F, G, Q, S)`` for one sample.

        ``x`` is the concatenated ambient portion vector, ``F`` the tangent
        transition Jacobian, ``G Q G^T`` the noise added by the step and
        ``S`` the Jacobian w.r.t. the concatenated static tangents.
        """
        raise NotImplementedError

    def static_blocks(self, statics):
        return [lookup_static(statics, n) for n in self.static_names]

    def propagate(self, x, dts, payloads, statics):
        """Return ``(x_end, Phi, S, P)``."""
        x = np.asarray(x, dtype=float).copy()
        n = x.size
        ns = sum(b.tangent_dim for b in self.static_blocks(statics))
        phi = np.eye(n)
        S = np.zeros((n, ns))
        P = np.zeros((n, n))
        for dt, u in zip(dts, payloads):
            x, F, G, Q, Sk = self.step(x, u, dt, statics)
            phi = F @ phi
            S = F @ S + Sk
            P = F @ P @ F.T + G @ Q @ G.T
        return x, phi, S, P

    def split(self, state: State, x):
        out, i = {}, 0
        for name in self.block_names:
            k = state[name].kind.ambient_dim
            out[name] = x[i:i + k]
            i += k
        return out

    def gather(self, state: State):
        return np.concatenate([state[n].value for n in self.block_names])


# --------------------------------------------------------------------------
# residual terms


class Residual:
    """A pre-weighted residual term touching an ordered list of blocks."""

    kind = "residual"
    robust = False

    blocks: List[ParameterBlock]

    def evaluate(self) -> Tuple[np.ndarray, List[np.ndarray]]:
        raise NotImplementedError

    @property
    def dim(self) -> int:
        return int(self.evaluate()[0].size)


class UpdateResidual(Residual):
    robust = True

    def __init__(self, model: UpdateModel, state: State, statics, meas: UpdateMeasurement):
        self.model = model
        self.state = state
        self.statics = statics
        self.meas = meas
        self.kind = meas.source
        self.blocks = model.blocks(state, statics, meas)

    def evaluate(self):
        f, jacs = self.model.error(self.state, self.statics, self.meas)
        W = self.meas.weight_sqrt
        return W @ f, [W @ J for J in jacs]


class ProcessResidual(Residual):
    def __init__(self, model: ProcessModel, prev: State, next_: State, chain: ProcessChain, statics):
        if abs(chain.t_start - prev.stamp) > SEGMENT_EPS or abs(chain.t_end - next_.stamp) > SEGMENT_EPS:
            raise AssignmentError(
                f"chain ({chain.t_start}, {chain.t_end}] does not span "
                f"({prev.stamp}, {next_.stamp}]")
        if chain.weight_sqrt is None:
            raise AssignmentError("process chain has no weight; call compute_chain_weight first")
        self.model = model
        self.prev = prev
        self.next = next_
        self.chain = chain
        self.statics = statics
        self.kind = chain.source
        self.blocks = ([prev[n] for n in model.block_names]
                       + [next_[n] for n in model.block_names]
                       + model.static_blocks(statics))

    def evaluate(self):
        model = self.model
        x_pred, phi, S, _ = model.propagate(model.gather(self.prev), self.chain.dts,
                                            self.chain.payloads, self.statics)
        pred = model.split(self.prev, x_pred)
        W = self.chain.weight_sqrt
        fs, d_next, d_pred = [], [], []
        for name in model.block_names:
            blk = self.next[name]
            fs.append(blk.kind.boxminus(blk.value, pred[name]))
            jy, jx = blk.kind.boxminus_jacobians(blk.value, pred[name])
            d_next.append(jy)
            d_pred.append(jx)
        f = np.concatenate(fs)
        Dn = _block_diag(d_next)
        Dp = _block_diag(d_pred)
        J_prev = W @ Dp @ phi
        J_next = W @ Dn
        J_stat = W @ Dp @ S
        jacs = _split_cols(J_prev, [b.tangent_dim for b in self.blocks[:len(model.block_names)]])
        jacs += _split_cols(J_next, [self.next[n].tangent_dim for n in model.block_names])
        if S.shape[1]:
            jacs += _split_cols(J_stat, [b.tangent_dim for b in model.static_blocks(self.statics)])
        return W @ f, jacs


class FunctionResidual(Residual):
    """Residual from a plain callable ``fn(*values) -> e`` or ``-> (e, jacs)``.

    Without analytic Jacobians, central differences in the tangent space are
    used.  Handy for tests and one-off constraints.
    """

    def __init__(self, blocks, fn, kind="function", robust=False, analytic=False):
        self.blocks = list(blocks)
        self.fn = fn
        self.kind = kind
        self.robust = robust
        self.analytic = analytic

    def evaluate(self):
        vals = [b.value for b in self.blocks]
        if self.analytic:
            e, jacs = self.fn(*vals)
            return np.atleast_1d(np.asarray(e, dtype=float)), [np.atleast_2d(J) for J in jacs]
        e = np.atleast_1d(np.asarray(self.fn(*vals), dtype=float))
        return e, numeric_jacobians(lambda: np.atleast_1d(self.fn(*[b.value for b in self.blocks])),
                                    self.blocks)


def _block_diag(mats):
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    i = 0
    for m in mats:
        k = m.shape[0]
        out[i:i + k, i:i + k] = m
        i += k
    return out


def _split_cols(J, widths):
    out, i = [], 0
    for w in widths:
        out.append(J[:, i:i + w])
        i += w
    return out


def numeric_jacobians(fn, blocks, eps=1e-6):
    """Central-difference Jacobians of ``fn()`` w.r.t. tangent increments of each block.

    Block values are perturbed in place and restored.
    """
    jacs = []
    for blk in blocks:
        x0 = blk.value.copy()
        cols = []
        for k in range(blk.tangent_dim):
            d = np.zeros(blk.tangent_dim)
            d[k] = eps
            blk.value = blk.kind.boxplus(x0, d)
            ep = np.array(fn(), dtype=float)
            blk.value = blk.kind.boxplus(x0, -d)
            em = np.array(fn(), dtype=float)
            blk.value = x0.copy()
            cols.append((ep - em) / (2 * eps))
        jacs.append(np.stack(cols, axis=1) if cols else np.zeros((0, 0)))
    return jacs


def jacobian_check(residual: Residual, eps=1e-6) -> float:
    """Largest relative deviation between analytic and central-difference Jacobians.

    Relative to ``max(||J_fd||_F, 1)`` per block.
    """
    _, analytic = residual.evaluate()
    numeric = numeric_jacobians(lambda: residual.evaluate()[0], residual.blocks, eps)
    worst = 0.0
    for Ja, Jn in zip(analytic, numeric):
        err = np.linalg.norm(Ja - Jn) / max(np.linalg.norm(Jn), 1.0)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# operations on single residuals


def _active_jacobians(blocks, jacs):
    out = {}
    for blk, J in zip(blocks, jacs):
        if blk.active:
            if blk in out:
                out[blk] = out[blk] + J
            else:
                out[blk] = J
    return out


def evaluate_update_residual(model: UpdateModel, state: State, statics, meas: UpdateMeasurement):
    """Return ``(e, {block: J})`` with Jacobian entries only for active blocks."""
    r = UpdateResidual(model, state, statics, meas)
    e, jacs = r.evaluate()
    return e, _active_jacobians(r.blocks, jacs)


def evaluate_process_residual(model: ProcessModel, prev: State, next_: State,
                              chain: ProcessChain, statics):
    r = ProcessResidual(model, prev, next_, chain, statics)
    e, jacs = r.evaluate()
    return e, _active_jacobians(r.blocks, jacs)


def compute_chain_weight(model: ProcessModel, prev: State, chain: ProcessChain, statics,
                         rcond=1e-12) -> np.ndarray:
    """Upper-triangular square-root information of the propagated state.

    Propagation starts from zero uncertainty on ``prev``.  The result is
    stored on ``chain`` and returned.
    """
    if len(chain) == 0:
        raise AssignmentError(f"process chain {chain.source!r} ({chain.t_start}, {chain.t_end}] is empty")
    _, _, _, P = model.propagate(model.gather(prev), chain.dts, chain.payloads, statics)
    chain.weight_sqrt = information_sqrt(P, rcond)
    return chain.weight_sqrt


def information_sqrt(P, rcond=1e-12):
    """Upper Cholesky factor ``R`` with ``R^T R = P^{-1}``."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    scale = max(w.max(initial=0.0), 0.0)
    bad = np.where(w <= rcond * max(scale, 1e-300))[0]
    if bad.size or scale == 0.0:
        dirs = sorted({int(np.argmax(np.abs(V[:, j]))) for j in bad}) or list(range(P.shape[0]))
        raise ObservabilityError(
            f"propagated covariance is singular; unconstrained coordinates {dirs}", dirs)
    L = np.linalg.cholesky(np.linalg.inv(P))
    return L.T.copy()


def total_cost(residuals) -> float:
    return float(sum(np.dot(e, e) for e in (r.evaluate()[0] for r in residuals)))


class Problem:
    """Parameter blocks in layout order plus the residual terms over them.

    Layout order is statics first, then states by stamp.  Blocks referenced
    by residuals but never registered are appended as state-like blocks.
    """

    def __init__(self, residuals=(), parameters=(), statics=()):
        self.parameters: List[ParameterBlock] = []
        self.static_ids = set()
        self.labels: Dict[int, str] = {}
        for b in statics:
            self.add_parameter(b, static=True)
        for b in parameters:
            self.add_parameter(b)
        self.residuals: List[Residual] = []
        for r in residuals:
            self.add_residual(r)

    def add_parameter(self, block: ParameterBlock, static=False, label=None):
        if id(block) in self.labels:
            return
        self.parameters.append(block)
        self.labels[id(block)] = label or block.name or f"block{len(self.parameters) - 1}"
        if static:
            self.static_ids.add(id(block))

    def add_residual(self, residual: Residual):
        for b in residual.blocks:
            self.add_parameter(b)
        self.residuals.append(residual)

    def label(self, block) -> str:
        return self.labels.get(id(block), block.name)

    def is_static(self, block) -> bool:
        return id(block) in self.static_ids

    def active_parameters(self) -> List[ParameterBlock]:
        return [b for b in self.parameters if b.active]

    def cost(self) -> float:
        return total_cost(self.residuals)
