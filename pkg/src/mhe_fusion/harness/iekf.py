"""Iterated extended Kalman filter over the same models as the MHE engine.

Serves as the filtering baseline.  The state is a set of named blocks on
their manifolds; the covariance lives in the concatenated tangent space.
Statics are held fixed at their configured values.
"""
from __future__ import annotations

from typing import Dict, Optional

import numpy as np
import scipy.linalg as sla

from ..manifold import ManifoldKind, ParameterBlock
from ..problem import (SEGMENT_EPS, ConfigurationError, ProcessMeasurement, ProcessModel, State,
                       UpdateMeasurement, UpdateModel)


def check_single_process_per_portion(process_models: Dict[str, ProcessModel]):
    """Raise if two process models act on a common state block."""
    owner: Dict[str, str] = {}
    for src, model in process_models.items():
        for name in model.block_names:
            if name in owner:
                raise ConfigurationError(
                    f"IEKF rejects process models {owner[name]!r} and {src!r}: both propagate "
                    f"state block {name!r}. A filter propagates each portion of the state with a "
                    f"single process model and cannot directly fuse several process measurement "
                    f"streams acting on the same portion; use the moving-horizon estimator for "
                    f"this configuration.")
            owner[name] = src


class IEKF:
    def __init__(self, state_blocks: Dict[str, ManifoldKind], update_models: Dict[str, UpdateModel],
                 process_models: Dict[str, ProcessModel], statics: Optional[Dict[str, ParameterBlock]] = None,
                 max_iterations: int = 5, step_tol: float = 1e-10):
        check_single_process_per_portion(process_models)
        self.kinds = dict(state_blocks)
        self.update_models = update_models
        self.process_models = process_models
        self.statics = {n: ParameterBlock(b.kind, b.value.copy(), False, n)
                        for n, b in (statics or {}).items()}
        self.max_iterations = max_iterations
        self.step_tol = step_tol
        self.names = list(state_blocks)
        widths = [k.tangent_dim for k in state_blocks.values()]
        off = np.concatenate([[0], np.cumsum(widths)]).astype(int)
        self.slices = {n: slice(int(off[i]), int(off[i + 1])) for i, n in enumerate(self.names)}
        self.dim = int(off[-1])
        self.state: Optional[State] = None
        self.P: Optional[np.ndarray] = None
        self.stamp: Optional[float] = None
        self._last_sample: Dict[str, float] = {}
        self.iterations = []

    @property
    def initialized(self):
        return self.state is not None

    def initialize(self, stamp, values: Dict[str, np.ndarray], covariance):
        blocks = {n: ParameterBlock(k, values[n], True, n) for n, k in self.kinds.items()}
        self.state = State(stamp, blocks)
        self.P = np.array(covariance, dtype=float).reshape(self.dim, self.dim)
        self.stamp = stamp

    def values(self):
        return self.state.values()

    def _portion(self, model):
        return np.concatenate([np.arange(self.slices[n].start, self.slices[n].stop)
                               for n in model.block_names])

    def process(self, meas: ProcessMeasurement):
        """Propagate the affected portion over the part of the sample after the filter start."""
        prev = self._last_sample.get(meas.source)
        self._last_sample[meas.source] = meas.stamp
        if not self.initialized or prev is None:
            return
        dt = meas.stamp - max(prev, self.stamp)
        if dt <= SEGMENT_EPS:
            return
        model = self.process_models[meas.source]
        x, F, G, Q, _ = model.step(model.gather(self.state), meas.payload, dt, self.statics)
        for name, v in model.split(self.state, x).items():
            blk = self.state[name]
            blk.value = blk.kind.project(v)
        idx = self._portion(model)
        Fi = np.eye(self.dim)
        Fi[np.ix_(idx, idx)] = F
        self.P = Fi @ self.P @ Fi.T
        self.P[np.ix_(idx, idx)] += G @ Q @ G.T
        self.state.stamp = meas.stamp

    def _linearize(self, model, meas):
        f, jacs = model.error(self.state, self.statics, meas)
        J = np.zeros((len(f), self.dim))
        state_ids = {id(self.state[n]): n for n in self.names}
        for blk, Jb in zip(model.blocks(self.state, self.statics, meas), jacs):
            name = state_ids.get(id(blk))
            if name is not None:
                J[:, self.slices[name]] += Jb
        W = meas.weight_sqrt
        return W @ f, W @ J

    def update(self, meas: UpdateMeasurement) -> int:
        """Iterated Gauss-Newton update; returns the number of iterations run."""
        model = self.update_models[meas.source]
        prior = {n: self.state[n].value.copy() for n in self.names}
        c = sla.cho_factor(self.P, lower=True)
        info = sla.cho_solve(c, np.eye(self.dim))
        it = 0
        for it in range(1, self.max_iterations + 1):
            e, J = self._linearize(model, meas)
            d = np.concatenate([self.state[n].kind.boxminus(self.state[n].value, prior[n])
                                for n in self.names])
            A = info + J.T @ J
            g = info @ d + J.T @ e
            step = -np.linalg.solve(A, g)
            for n in self.names:
                self.state[n].boxplus_(step[self.slices[n]])
            if np.max(np.abs(step)) < self.step_tol:
                break
        _, J = self._linearize(model, meas)
        A = info + J.T @ J
        P = np.linalg.inv(A)
        self.P = 0.5 * (P + P.T)
        self.iterations.append(it)
        return it
