"""Marginalization by block Gaussian elimination and the resulting prior.

The prior residual is ``e_p = J_p (x [-] x_lin) + o`` with
``o = -(J_p^T)^+ b*``.  Its Jacobian w.r.t. the linked blocks is ``J_p``
(the tangent transport at ``x_lin`` is taken as identity), so at the
linearization point it contributes exactly ``H*`` and ``b*`` to the normal
equations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .manifold import ManifoldKind, ParameterBlock
from .problem import ObservabilityError, Problem, Residual
from .solver import apply_robust_loss, assemble_normal_equations, linearize

EIG_RTOL = 1e-10
INDEFINITE_RTOL = 1e-8


class MarginalizationError(ValueError):
    pass


class PriorConstraint(Residual):
    kind = "prior"
    robust = False

    def __init__(self, blocks: Sequence[ParameterBlock], linearization_point, J_p, offset):
        self.blocks = list(blocks)
        self.linearization_point = [np.array(v, dtype=float) for v in linearization_point]
        self.J_p = np.atleast_2d(np.asarray(J_p, dtype=float))
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        widths = [b.tangent_dim for b in self.blocks]
        if self.J_p.shape[1] != sum(widths):
            raise MarginalizationError(
                f"J_p has {self.J_p.shape[1]} columns, linked blocks have {sum(widths)} tangent dims")
        if self.J_p.shape[0] != self.offset.size:
            raise MarginalizationError("offset length must match the rows of J_p")
        self._widths = widths

    @property
    def H(self):
        """Information ``J_p^T J_p`` carried by the prior."""
        return self.J_p.T @ self.J_p

    @property
    def b(self):
        """Gradient vector the prior contributes at its linearization point."""
        return -self.J_p.T @ self.offset

    def delta(self):
        return np.concatenate([
            b.kind.boxminus(b.value, x0) for b, x0 in zip(self.blocks, self.linearization_point)
        ]) if self.blocks else np.zeros(0)

    def evaluate(self):
        e = self.J_p @ self.delta() + self.offset
        jacs, i = [], 0
        for w in self._widths:
            jacs.append(self.J_p[:, i:i + w])
            i += w
        return e, jacs

    def to_dict(self, names=None):
        names = names or [b.name for b in self.blocks]
        return {
            "params": list(names),
            "kinds": [b.kind.to_json() for b in self.blocks],
            "linearization_point": [v.tolist() for v in self.linearization_point],
            "J_p": self.J_p.tolist(),
            "offset": self.offset.tolist(),
        }

    @classmethod
    def from_dict(cls, d, lookup):
        """Rebuild from :meth:`to_dict` output; ``lookup(name)`` returns the live block."""
        blocks = [lookup(n) for n in d["params"]]
        for blk, kd in zip(blocks, d["kinds"]):
            if blk.kind != ManifoldKind.from_json(kd):
                raise MarginalizationError(f"block {blk.name!r} changed manifold since snapshot")
        J = np.array(d["J_p"], dtype=float).reshape(len(d["offset"]), -1)
        return cls(blocks, d["linearization_point"], J, d["offset"])

    def __repr__(self):
        return f"PriorConstraint({[b.name for b in self.blocks]}, rank={self.J_p.shape[0]})"


@dataclass
class Subproblem:
    H_mm: np.ndarray
    H_ml: np.ndarray
    H_lm: np.ndarray
    H_ll: np.ndarray
    b_m: np.ndarray
    b_l: np.ndarray
    m_blocks: List[ParameterBlock]
    l_blocks: List[ParameterBlock]
    residuals: List[Residual] = field(default_factory=list)

    @property
    def empty(self):
        return not self.residuals


def build_subproblem(problem: Problem, params_m: Sequence[ParameterBlock], loss=None) -> Subproblem:
    """Normal equations of the residuals touching ``params_m``, with ``x_m`` ordered first.

    ``x_l`` are the other active blocks those residuals touch, in the
    problem's layout order.
    """
    params_m = [b for b in params_m if b.active]
    if not params_m:
        raise MarginalizationError("nothing to marginalize: params_m is empty or inactive")
    m_ids = {id(b) for b in params_m}
    residuals = [r for r in problem.residuals if any(id(b) in m_ids for b in r.blocks)]
    touched = {id(b) for r in residuals for b in r.blocks if b.active}
    l_blocks = [b for b in problem.parameters if id(b) in touched and id(b) not in m_ids]
    # blocks not registered with the problem still count
    seen = {id(b) for b in problem.parameters}
    for r in residuals:
        for b in r.blocks:
            if b.active and id(b) not in m_ids and id(b) not in seen:
                l_blocks.append(b)
                seen.add(id(b))
    sub = Problem(residuals)
    terms = linearize(sub)
    if loss is not None:
        terms = [_robust_term(t, loss) for t in terms]
    neq = assemble_normal_equations(terms, params_m + l_blocks)
    H = neq.H.toarray()
    k = sum(b.tangent_dim for b in params_m)
    return Subproblem(H[:k, :k], H[:k, k:], H[k:, :k], H[k:, k:], neq.b[:k], neq.b[k:],
                      params_m, l_blocks, residuals)


def _robust_term(t, loss):
    if not t.residual.robust:
        return t
    e, jacs, _ = apply_robust_loss(t.e, t.jacobians, loss)
    return type(t)(t.residual, e, jacs, t.blocks)


def schur_marginalize(sub: Subproblem):
    """Return ``(H*, b*)``; ``H_mm`` is inverted through its Cholesky factor."""
    try:
        c = sla.cho_factor(sub.H_mm, lower=True)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(sub.H_mm)
        tol = EIG_RTOL * max(abs(w).max(initial=0.0), 1.0)
        dirs = _direction_labels(sub.m_blocks, V[:, w <= tol])
        raise ObservabilityError(
            f"cannot marginalize: H_mm is singular along {dirs}", dirs) from None
    X = sla.cho_solve(c, np.column_stack([sub.H_ml, sub.b_m]))
    H_star = sub.H_ll - sub.H_lm @ X[:, :-1]
    b_star = sub.b_l - sub.H_lm @ X[:, -1]
    return 0.5 * (H_star + H_star.T), b_star


def _direction_labels(blocks, null_vectors):
    labels = []
    offsets = np.cumsum([0] + [b.tangent_dim for b in blocks])
    for j in range(null_vectors.shape[1]):
        i = int(np.argmax(np.abs(null_vectors[:, j])))
        bi = int(np.searchsorted(offsets, i, side="right") - 1)
        labels.append(f"{blocks[bi].name}[{i - offsets[bi]}]")
    return labels


def _factor_psd(H_star, scale=0.0):
    # tolerances are relative to the larger of H*'s own spectrum and ``scale``
    H_star = 0.5 * (H_star + H_star.T)
    w, V = np.linalg.eigh(H_star)
    wmax = max(abs(w).max(initial=0.0), scale)
    if wmax > 0 and w.min() < -INDEFINITE_RTOL * wmax:
        raise MarginalizationError(f"H* is indefinite (min eigenvalue {w.min():.3g}, max {wmax:.3g})")
    keep = w > EIG_RTOL * wmax if wmax > 0 else np.zeros(w.size, dtype=bool)
    return w[keep], V[:, keep]


def build_prior(H_star, b_star, linked_params: Sequence[ParameterBlock],
                linearization_point=None, scale: float = 0.0) -> PriorConstraint:
    """Prior from ``H* = J_p^T J_p`` (rank-revealing eigendecomposition).

    Eigenvalues below ``1e-10 * max`` are dropped together with their rows.
    ``scale`` raises that reference magnitude, for an ``H*`` obtained by
    cancellation from a larger matrix.  The linearization point defaults to
    the blocks' current values.
    """
    H_star = np.atleast_2d(np.asarray(H_star, dtype=float))
    b_star = np.atleast_1d(np.asarray(b_star, dtype=float))
    w, V = _factor_psd(H_star, scale)
    sq = np.sqrt(w)
    J_p = sq[:, None] * V.T
    # (J_p^T)^+ = diag(1/sqrt(w)) V^T
    offset = -(V.T @ b_star) / sq if w.size else np.zeros(0)
    if linearization_point is None:
        linearization_point = [b.value.copy() for b in linked_params]
    return PriorConstraint(linked_params, linearization_point, J_p.reshape(w.size, H_star.shape[0]),
                           offset)


def evaluate_prior(prior: PriorConstraint):
    """Residual and Jacobians (w.r.t. every linked block) at the current values."""
    return prior.evaluate()


def factor_out(prior: PriorConstraint, params_r: Sequence[ParameterBlock]) -> PriorConstraint:
    """Eliminate ``params_r`` from a prior by a Schur complement on its ``(H*, b*)``.

    The eliminated information block may be rank deficient; its
    pseudo-inverse is used.  The survivors keep the original linearization
    point.
    """
    r_ids = {id(b) for b in params_r}
    linked = {id(b) for b in prior.blocks}
    if not r_ids <= linked:
        raise MarginalizationError("params_r must be linked to the prior")
    offsets = np.cumsum([0] + [b.tangent_dim for b in prior.blocks])
    r_idx, l_idx, keep_blocks, keep_lin = [], [], [], []
    for i, blk in enumerate(prior.blocks):
        cols = list(range(offsets[i], offsets[i + 1]))
        if id(blk) in r_ids:
            r_idx += cols
        else:
            l_idx += cols
            keep_blocks.append(blk)
            keep_lin.append(prior.linearization_point[i])
    H, b = prior.H, prior.b
    if not l_idx:
        return PriorConstraint([], [], np.zeros((0, 0)), np.zeros(0))
    H_rr = H[np.ix_(r_idx, r_idx)]
    H_lr = H[np.ix_(l_idx, r_idx)]
    scale = float(np.abs(H).max(initial=0.0))
    w, V = _factor_psd(H_rr, scale) if r_idx else (np.zeros(0), np.zeros((0, 0)))
    H_rr_pinv = (V / w) @ V.T if w.size else np.zeros((len(r_idx), len(r_idx)))
    H_new = H[np.ix_(l_idx, l_idx)] - H_lr @ H_rr_pinv @ H_lr.T
    b_new = b[l_idx] - H_lr @ H_rr_pinv @ b[r_idx]
    return build_prior(H_new, b_new, keep_blocks, keep_lin, scale=scale)


def marginalize(problem: Problem, params_m: Sequence[ParameterBlock], loss=None) -> Optional[PriorConstraint]:
    """Build the subproblem around ``params_m`` and summarize it as a prior.

    Returns ``None`` when no residual touches ``params_m``.
    """
    sub = build_subproblem(problem, params_m, loss)
    if sub.empty:
        return None
    H_star, b_star = schur_marginalize(sub)
    scale = float(np.abs(sub.H_ll).max(initial=0.0))
    return build_prior(H_star, b_star, sub.l_blocks, scale=scale)
