"""Robustified Levenberg-Marquardt on sparse normal equations.

The normal equations ``H dx = b`` use ``H = J^T J`` and ``b = -J^T e``.
``H`` is laid out statics first, then states by stamp; the Cholesky
factorization eliminates state blocks first and statics last, which keeps
the fill inside the static rows.
"""
from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import kernels
from .manifold import ParameterBlock
from .problem import Problem, Residual


class SolverError(RuntimeError):
    pass


class FactorizationError(SolverError):
    """Cholesky failed; ``block`` names the parameter block of the first bad pivot."""

    def __init__(self, message, block=None, label=None):
        super().__init__(message)
        self.block = block
        self.label = label


@dataclass(frozen=True)
class Huber:
    threshold: float

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("Huber threshold must be positive")


@dataclass
class SolverOptions:
    max_iterations: int = 10
    cost_decrease_tol: float = 1e-6
    gradient_tol: float = 1e-8
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.5
    loss: Optional[Huber] = None
    worker_count: int = 1
    max_lambda: float = 1e16
    # accepted steps whose gain ratio is this close to 1 switch to undamped steps
    gauss_newton_ratio_tol: float = 1e-3

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not (self.cost_decrease_tol > 0 and self.gradient_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.initial_lambda < 0:
            raise ValueError("initial_lambda must be >= 0")
        if not self.lambda_up > 1:
            raise ValueError("lambda_up must be > 1")
        if not 0 < self.lambda_down < 1:
            raise ValueError("lambda_down must lie in (0, 1)")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if not 0 <= self.gauss_newton_ratio_tol < 1:
            raise ValueError("gauss_newton_ratio_tol must lie in [0, 1)")


# --------------------------------------------------------------------------
# linearization


@dataclass
class LinearizedTerm:
    residual: Residual
    e: np.ndarray
    jacobians: Dict[int, np.ndarray]  # id(block) -> J, active blocks only
    blocks: List[ParameterBlock]


def _linearize_one(index, residual):
    e, jacs = residual.evaluate()
    e = np.asarray(e, dtype=float)
    out, blocks = {}, []
    for blk, J in zip(residual.blocks, jacs):
        if not blk.active:
            continue
        if id(blk) in out:
            out[id(blk)] = out[id(blk)] + J
        else:
            out[id(blk)] = np.asarray(J, dtype=float)
            blocks.append(blk)
    return LinearizedTerm(residual, e, out, blocks)


def _check_finite(terms: Sequence[LinearizedTerm]):
    """Name the first residual with a non-finite value or Jacobian entry."""
    for index, t in enumerate(terms):
        if not np.all(np.isfinite(t.e)):
            raise SolverError(f"residual {index} ({t.residual.kind}) is not finite")
        for blk in t.blocks:
            if not np.all(np.isfinite(t.jacobians[id(blk)])):
                raise SolverError(f"Jacobian of residual {index} ({t.residual.kind}) w.r.t. "
                                  f"{blk.name!r} is not finite")


def linearize(problem: Problem, worker_count: int = 1) -> List[LinearizedTerm]:
    """Evaluate every residual and its active-block Jacobians.

    Non-finite entries are caught when the terms are assembled, which then
    names the offending residual.  With ``worker_count > 1`` residuals are
    evaluated on a thread pool; the result order always follows
    ``problem.residuals``.
    """
    residuals = problem.residuals
    if worker_count > 1 and len(residuals) > 1:
        with ThreadPoolExecutor(max_workers=worker_count) as pool:
            terms = list(pool.map(_linearize_one, range(len(residuals)), residuals))
    else:
        terms = [_linearize_one(i, r) for i, r in enumerate(residuals)]
    return terms


def huber_scale(s: float, threshold: float) -> float:
    if s <= threshold:
        return 1.0
    return math.sqrt(2.0 * threshold * s - threshold * threshold) / s


def apply_robust_loss(e, jacobians, loss: Optional[Huber]):
    """Rescale a residual block so its squared norm equals the Huber value.

    Returns ``(e, jacobians, scale)``; ``jacobians`` may be a dict or list.
    """
    if loss is None:
        return e, jacobians, 1.0
    s = float(np.linalg.norm(e))
    k = huber_scale(s, loss.threshold)
    if k == 1.0:
        return e, jacobians, 1.0
    if isinstance(jacobians, dict):
        scaled = {key: k * J for key, J in jacobians.items()}
    else:
        scaled = [k * J for J in jacobians]
    return k * e, scaled, k


def robust_cost(terms, loss) -> float:
    total = 0.0
    for t in terms:
        s2 = float(np.dot(t.e, t.e))
        if loss is not None and t.residual.robust:
            s = math.sqrt(s2)
            k = loss.threshold
            total += s2 if s <= k else 2.0 * k * s - k * k
        else:
            total += s2
    return total


def evaluate_cost(problem: Problem, loss=None) -> float:
    total = 0.0
    for r in problem.residuals:
        e = r.evaluate()[0]
        s2 = float(np.dot(e, e))
        if loss is not None and r.robust:
            s = math.sqrt(s2)
            k = loss.threshold
            total += s2 if s <= k else 2.0 * k * s - k * k
        else:
            total += s2
    if not math.isfinite(total):
        raise SolverError("cost is not finite")
    return total


# --------------------------------------------------------------------------
# normal equations


@dataclass
class SparseNormalEquations:
    H: sp.csc_matrix
    b: np.ndarray
    blocks: List[ParameterBlock]
    offsets: np.ndarray
    pattern: set
    labels: List[str]
    static: List[bool]

    @property
    def dim(self) -> int:
        return int(self.b.size)

    def index(self, block) -> int:
        for i, b in enumerate(self.blocks):
            if b is block:
                return i
        raise KeyError(block.name)

    def slice(self, block) -> slice:
        i = self.index(block)
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def block_mask(self) -> np.ndarray:
        n = len(self.blocks)
        mask = np.zeros((n, n), dtype=bool)
        for i, j in self.pattern:
            mask[i, j] = mask[j, i] = True
        return mask


def assemble_normal_equations(terms: Sequence[LinearizedTerm], blocks: Sequence[ParameterBlock],
                              labels=None, static=None) -> SparseNormalEquations:
    """Accumulate ``J^T J`` and ``-J^T e`` term by term, in term order."""
    blocks = list(blocks)
    index = {id(b): i for i, b in enumerate(blocks)}
    widths = [b.tangent_dim for b in blocks]
    offsets = np.concatenate([[0], np.cumsum(widths)]).astype(int)
    n = int(offsets[-1])
    b = np.zeros(n)
    ranges = [np.arange(offsets[i], offsets[i + 1]) for i in range(len(blocks))]
    pattern = set()
    rows, cols, vals = [], [], []
    for t in terms:
        ids = [index[id(blk)] for blk in t.blocks]
        if not ids:
            continue
        J = np.hstack([t.jacobians[id(blk)] for blk in t.blocks])
        idx = np.concatenate([ranges[i] for i in ids])
        b[idx] -= J.T @ t.e
        k = idx.size
        rows.append(np.broadcast_to(idx[:, None], (k, k)).ravel())
        cols.append(np.broadcast_to(idx[None, :], (k, k)).ravel())
        vals.append((J.T @ J).ravel())
        for p in range(len(ids)):
            for q in range(p, len(ids)):
                pattern.add((min(ids[p], ids[q]), max(ids[p], ids[q])))
    # every block keeps its diagonal block in the pattern, even if untouched
    for i in range(len(blocks)):
        if (i, i) not in pattern:
            pattern.add((i, i))
            w = widths[i]
            rows.append(np.repeat(ranges[i], w))
            cols.append(np.tile(ranges[i], w))
            vals.append(np.zeros(w * w))
    if rows:
        H = sp.csc_matrix(_csc_arrays(np.concatenate(rows), np.concatenate(cols),
                                      np.concatenate(vals), n), shape=(n, n))
    else:
        H = sp.csc_matrix((n, n))
    labels = list(labels) if labels is not None else [blk.name for blk in blocks]
    static = list(static) if static is not None else [False] * len(blocks)
    return SparseNormalEquations(H, b, blocks, offsets, pattern, labels, static)


def normal_equations(problem: Problem, loss=None, worker_count=1):
    """Linearize ``problem`` and return ``(neq, robust cost at the current values)``."""
    return _normal_equations_from_terms(problem, linearize(problem, worker_count), loss)


def _normal_equations_from_terms(problem, terms, loss):
    blocks = problem.active_parameters()
    cost = robust_cost(terms, loss)
    if loss is not None:
        terms = [_robustify(t, loss) for t in terms]
    neq = assemble_normal_equations(terms, blocks, [problem.label(b) for b in blocks],
                                    [problem.is_static(b) for b in blocks])
    if not (math.isfinite(cost) and np.all(np.isfinite(neq.b)) and np.all(np.isfinite(neq.H.data))):
        _check_finite(terms)
        raise SolverError("normal equations are not finite")
    return neq, cost


def _csc_arrays(rows, cols, vals, n):
    """Coalesce triplets into sorted CSC arrays ``(data, indices, indptr)``; duplicates add up."""
    key = cols.astype(np.int64) * n + rows
    uniq, inv = np.unique(key, return_inverse=True)
    data = np.bincount(inv, weights=vals, minlength=uniq.size)
    indices = (uniq % n).astype(np.int32) if n else uniq.astype(np.int32)
    indptr = np.searchsorted(uniq // max(n, 1), np.arange(n + 1)).astype(np.int32)
    return data, indices, indptr


def _robustify(t: LinearizedTerm, loss) -> LinearizedTerm:
    if not t.residual.robust:
        return t
    e, jacs, k = apply_robust_loss(t.e, t.jacobians, loss)
    if k == 1.0:
        return t
    return LinearizedTerm(t.residual, e, jacs, t.blocks)


class CholeskyFactor:
    """Sparse Cholesky of ``H + lam * diag(H)`` in the fixed elimination order."""

    def __init__(self, neq: SparseNormalEquations, lam: float = 0.0):
        self.neq = neq
        n = neq.dim
        order = [i for i in range(len(neq.blocks)) if not neq.static[i]]
        order += [i for i in range(len(neq.blocks)) if neq.static[i]]
        perm = np.concatenate([np.arange(neq.offsets[i], neq.offsets[i + 1]) for i in order]) \
            if order else np.zeros(0, dtype=int)
        self.perm = perm.astype(int)
        H = neq.H
        iperm = np.empty(n, dtype=int)
        iperm[self.perm] = np.arange(n)
        col = np.repeat(np.arange(n), np.diff(H.indptr))
        row = H.indices
        data = H.data
        if lam:
            data = data + lam * np.where(row == col, data, 0.0)
        Ax, Ai, Ap = _csc_arrays(iperm[row], iperm[col], data, n)
        try:
            self.Lp, self.Li, self.Lx = kernels.cholesky(n, Ap, Ai, Ax)
        except kernels.NotPositiveDefiniteError as exc:
            col = int(self.perm[exc.index])
            bi = int(np.searchsorted(neq.offsets, col, side="right") - 1)
            label = neq.labels[bi]
            raise FactorizationError(
                f"normal equations are not positive definite at parameter block {label!r} "
                f"(pivot {exc.pivot:.3g}); the block is unobservable or the problem is indefinite",
                neq.blocks[bi], label) from exc

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 2:
            return np.column_stack([self.solve(rhs[:, k]) for k in range(rhs.shape[1])])
        out = np.empty_like(rhs)
        out[self.perm] = kernels.cholesky_solve(self.Lp, self.Li, self.Lx, rhs[self.perm])
        return out


def solve_damped(neq: SparseNormalEquations, lam: float = 0.0) -> np.ndarray:
    """Solve ``(H + lam diag(H)) dx = b``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if neq.dim == 0:
        return np.zeros(0)
    return CholeskyFactor(neq, lam).solve(neq.b)


def covariance_blocks(neq: SparseNormalEquations, blocks: Sequence[ParameterBlock]) -> np.ndarray:
    """Rows/columns of ``H^{-1}`` belonging to ``blocks``, as a dense matrix."""
    factor = CholeskyFactor(neq)
    idx = np.concatenate([np.arange(neq.slice(b).start, neq.slice(b).stop) for b in blocks])
    E = np.zeros((neq.dim, idx.size))
    E[idx, np.arange(idx.size)] = 1.0
    C = factor.solve(E)[idx]
    return 0.5 * (C + C.T)


# --------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    trial_cost: float
    lam: float
    step_norm: float
    accepted: bool
    gain_ratio: float
    t_linearize: float
    t_solve: float


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    status: str
    iterations: List[IterationRecord] = field(default_factory=list)

    @property
    def accepted_steps(self) -> int:
        return sum(1 for it in self.iterations if it.accepted)

    def to_dict(self):
        d = asdict(self)
        d["accepted_steps"] = self.accepted_steps
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _apply_step(blocks, offsets, dx):
    saved = [b.value.copy() for b in blocks]
    for i, b in enumerate(blocks):
        b.boxplus_(dx[offsets[i]:offsets[i + 1]])
    return saved


def _restore(blocks, saved):
    for b, v in zip(blocks, saved):
        b.value = v


def optimize(problem: Problem, options: Optional[SolverOptions] = None) -> OptimizationReport:
    """Minimize the (robustified) cost in place on the problem's active blocks.

    The damping follows the usual multiplicative schedule; when an accepted
    step's actual cost decrease matches the quadratic model (gain ratio
    within ``gauss_newton_ratio_tol`` of 1) the damping is dropped to zero
    for the next step.  Linear problems then converge to the exact solution
    in two steps, and nearly linear ones avoid the slow crawl that diagonal
    damping causes on badly scaled windows.  Once an undamped step has been
    rejected the switch stays off for the rest of the call.
    """
    opts = options or SolverOptions()
    loss = opts.loss
    if not problem.residuals:
        return OptimizationReport(0.0, 0.0, "empty")
    if not problem.active_parameters():
        c = evaluate_cost(problem, loss)
        return OptimizationReport(c, c, "no_active_parameters")

    t0 = time.perf_counter()
    neq, cost = normal_equations(problem, loss, opts.worker_count)
    if not math.isfinite(cost):
        raise SolverError("initial cost is not finite")
    report = OptimizationReport(cost, cost, "max_iterations")
    t_lin = time.perf_counter() - t0
    lam = opts.initial_lambda
    undamped_ok = opts.gauss_newton_ratio_tol > 0
    blocks = neq.blocks
    it = 0
    while it < opts.max_iterations:
        if neq.dim == 0 or np.max(np.abs(neq.b)) < opts.gradient_tol:
            report.status = "gradient"
            break
        it += 1
        t0 = time.perf_counter()
        dx = solve_damped(neq, lam)
        t_solve = time.perf_counter() - t0
        predicted = float(2.0 * neq.b @ dx - dx @ (neq.H @ dx))
        saved = _apply_step(blocks, neq.offsets, dx)
        # the trial linearization doubles as the next iteration's if accepted
        t0 = time.perf_counter()
        try:
            trial_terms = linearize(problem, opts.worker_count)
            trial = robust_cost(trial_terms, loss)
        except SolverError:
            trial_terms, trial = None, math.inf
        if not math.isfinite(trial):
            trial = math.inf
        accepted = trial < cost
        ratio = (cost - trial) / predicted if predicted > 0 else 0.0
        report.iterations.append(IterationRecord(
            it, cost, trial, lam, float(np.linalg.norm(dx)), bool(accepted),
            float(ratio) if math.isfinite(ratio) else 0.0, t_lin, t_solve))
        if accepted:
            rel = (cost - trial) / cost if cost > 0 else 0.0
            cost = trial
            if undamped_ok and abs(ratio - 1.0) < opts.gauss_newton_ratio_tol:
                lam = 0.0
            else:
                lam *= opts.lambda_down
            if rel < opts.cost_decrease_tol:
                report.status = "cost"
                break
            neq, _ = _normal_equations_from_terms(problem, trial_terms, loss)
            t_lin = time.perf_counter() - t0
        else:
            _restore(blocks, saved)
            if lam == 0.0:
                undamped_ok = False
                lam = opts.initial_lambda or 1e-4
            else:
                lam *= opts.lambda_up
            if lam > opts.max_lambda:
                report.status = "stalled"
                break
            t_lin = 0.0
    report.final_cost = cost
    return report
