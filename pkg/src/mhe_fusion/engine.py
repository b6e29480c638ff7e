"""Online moving-horizon estimation over a sliding window of states."""
from __future__ import annotations

import json
import math
import threading
import time
from bisect import insort
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np

from .manifold import ManifoldKind, ParameterBlock
from .marginalization import PriorConstraint, build_prior, factor_out, marginalize
from .problem import (SEGMENT_EPS, AssignmentError, ConfigurationError, ProcessChain,
                      ProcessMeasurement, ProcessModel, ProcessResidual, Problem, State,
                      UpdateMeasurement, UpdateModel, UpdateResidual, chain_segments,
                      compute_chain_weight)
from .solver import (CholeskyFactor, OptimizationReport, SolverOptions, covariance_blocks,
                     normal_equations, optimize)

Measurement = Union[UpdateMeasurement, ProcessMeasurement]


class IncompleteChainError(AssignmentError):
    pass


@dataclass
class EngineConfig:
    state_blocks: Dict[str, ManifoldKind]
    update_models: Dict[str, UpdateModel]
    process_models: Dict[str, ProcessModel]
    spawn_sources: Set[str]
    batch_size: int = 5
    propagation_source: Optional[str] = None
    statics: Dict[str, ParameterBlock] = field(default_factory=dict)
    static_priors: Dict[str, np.ndarray] = field(default_factory=dict)
    initial_values: Dict[str, np.ndarray] = field(default_factory=dict)
    initial_info: Dict[str, np.ndarray] = field(default_factory=dict)
    use_seed: bool = True
    solver: SolverOptions = field(default_factory=SolverOptions)
    attach_tolerance: float = 1e-3
    active_sources: Optional[Set[str]] = None
    marginalize: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        self.spawn_sources = set(self.spawn_sources)
        if not self.spawn_sources:
            raise ConfigurationError("at least one update source must spawn states")
        missing = self.spawn_sources - set(self.update_models)
        if missing:
            raise ConfigurationError(f"spawn sources without update model: {sorted(missing)}")
        for name, m in self.process_models.items():
            for b in m.block_names:
                if b not in self.state_blocks:
                    raise ConfigurationError(f"process model {name!r} acts on unknown block {b!r}")
        if self.propagation_source is None and self.process_models:
            self.propagation_source = next(iter(self.process_models))
        if self.active_sources is not None:
            self.active_sources = set(self.active_sources)
            if not self.spawn_sources & self.active_sources:
                raise ConfigurationError("no active update source spawns states")

    def is_active(self, source) -> bool:
        return self.active_sources is None or source in self.active_sources

    @property
    def worker_count(self):
        return self.solver.worker_count


@dataclass
class EstimateOutput:
    stamp: float
    values: Dict[str, np.ndarray]
    propagated_stamp: Optional[float] = None
    propagated: Optional[Dict[str, np.ndarray]] = None
    covariance: Optional[np.ndarray] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.propagated_stamp is not None and self.propagated_stamp < self.stamp - SEGMENT_EPS:
            raise ValueError("propagated stamp precedes the optimized stamp")

    def to_record(self) -> Dict:
        rec = {
            "stamp": self.stamp,
            "values": {k: np.asarray(v).tolist() for k, v in self.values.items()},
            "propagated_stamp": self.propagated_stamp,
            "propagated": ({k: np.asarray(v).tolist() for k, v in self.propagated.items()}
                           if self.propagated is not None else None),
            "metadata": self.metadata,
        }
        if self.covariance is not None:
            rec["covariance"] = np.asarray(self.covariance).tolist()
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def write_estimate_stream(outputs: Iterable[EstimateOutput], fh):
    """Newline-delimited JSON, one record per estimate."""
    for out in outputs:
        fh.write(out.to_json())
        fh.write("\n")


@dataclass
class Counters:
    ingested: int = 0
    attached: int = 0
    dropped: int = 0
    process: int = 0
    drop_reasons: Dict[str, int] = field(default_factory=dict)

    def drop(self, reason):
        self.dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1


class Engine:
    """Moving-horizon estimator.

    Feed measurements with :meth:`ingest`, call :meth:`optimize_window` at
    the spawning-sensor rate and :meth:`forward_propagate` for real-time
    estimates in between.
    """

    def __init__(self, config: EngineConfig):
        self.config = config
        self.statics: Dict[str, ParameterBlock] = {}
        for name, blk in config.statics.items():
            b = blk.copy()
            b.name = name
            self.statics[name] = b
        self.states: List[State] = []
        self.priors: List[PriorConstraint] = []
        self.buffers: Dict[str, List[ProcessMeasurement]] = {s: [] for s in config.process_models}
        self.pending: List[UpdateMeasurement] = []
        self.counters = Counters()
        self.state_active = {name: True for name in config.state_blocks}
        self.marginalized: List[tuple] = []
        self.last_report: Optional[OptimizationReport] = None
        self._last_output: Optional[EstimateOutput] = None
        self._fresh: Set[int] = set()
        self._dirty = False
        self._check_observability = False
        self._next_index = 0
        self._lock = threading.RLock()
        for name, info in config.static_priors.items():
            blk = self.statics[name]
            info = np.broadcast_to(np.asarray(info, dtype=float), (blk.tangent_dim,))
            self.priors.append(PriorConstraint([blk], [blk.value.copy()], np.diag(np.sqrt(info)),
                                               np.zeros(blk.tangent_dim)))

    # ------------------------------------------------------------------ ingestion

    @property
    def window_start(self) -> Optional[float]:
        return self.states[0].stamp if self.states else None

    def ingest(self, meas: Measurement):
        with self._lock:
            if isinstance(meas, ProcessMeasurement):
                self._ingest_process(meas)
            else:
                self._ingest_update(meas)

    def _ingest_process(self, meas: ProcessMeasurement):
        self.counters.process += 1
        if meas.source not in self.buffers:
            raise ConfigurationError(f"unknown process source {meas.source!r}")
        buf = self.buffers[meas.source]
        if buf and meas.stamp < buf[-1].stamp:
            insort(buf, meas, key=lambda m: m.stamp)
        else:
            buf.append(meas)

    def _ingest_update(self, meas: UpdateMeasurement):
        c = self.counters
        c.ingested += 1
        cfg = self.config
        if meas.source not in cfg.update_models:
            raise ConfigurationError(f"unknown update source {meas.source!r}")
        if not cfg.is_active(meas.source):
            c.drop("inactive_source")
            return
        tol = cfg.attach_tolerance
        if self.states and meas.stamp < self.states[0].stamp - tol:
            c.drop("older_than_window")
            return
        state = self._state_near(meas.stamp, tol)
        if state is not None:
            self._attach(state, meas)
        elif meas.source in cfg.spawn_sources and (not self.states or meas.stamp > self.states[-1].stamp):
            state = self._spawn(meas)
            self._attach(state, meas)
            for p in list(self.pending):
                if abs(p.stamp - state.stamp) <= tol:
                    self.pending.remove(p)
                    self._attach(state, p)
        elif not self.states or meas.stamp > self.states[-1].stamp:
            self.pending.append(meas)
        else:
            # mid-window without a state in tolerance: nearest state
            nearest = min(self.states, key=lambda s: abs(s.stamp - meas.stamp))
            self._attach(nearest, meas)

    def _state_near(self, stamp, tol):
        for s in reversed(self.states):
            if abs(s.stamp - stamp) <= tol:
                return s
            if s.stamp < stamp - tol:
                return None
        return None

    def _attach(self, state, meas):
        state.updates.append(meas)
        self.counters.attached += 1
        self._dirty = True

    def flush_pending(self):
        """Attach every pending update to its nearest state (or drop it)."""
        with self._lock:
            for p in self.pending:
                if self.states:
                    self._attach(min(self.states, key=lambda s: abs(s.stamp - p.stamp)), p)
                else:
                    self.counters.drop("no_state")
            self.pending = []

    def _spawn(self, meas: UpdateMeasurement) -> State:
        cfg = self.config
        k = self._next_index
        self._next_index += 1
        if self.states:
            prev = self.states[-1]
            values = {n: prev[n].value.copy() for n in cfg.state_blocks}
        else:
            values = {n: kind.identity() for n, kind in cfg.state_blocks.items()}
            for n, v in cfg.initial_values.items():
                values[n] = np.asarray(v, dtype=float)
            if cfg.use_seed:
                seed = cfg.update_models[meas.source].seed(meas, self.statics) or {}
                for n, v in seed.items():
                    if n in values:
                        values[n] = np.asarray(v, dtype=float)
        blocks = {n: ParameterBlock(kind, values[n], self.state_active[n], f"x{k}.{n}")
                  for n, kind in cfg.state_blocks.items()}
        state = State(meas.stamp, blocks)
        if not self.states:
            self._add_initial_prior(state)
        self.states.append(state)
        self._fresh.add(id(state))
        self._dirty = True
        self._complete_chains()
        return state

    def _add_initial_prior(self, state: State):
        cfg = self.config
        blocks, infos = [], []
        for n, info in cfg.initial_info.items():
            blk = state[n]
            blocks.append(blk)
            infos.append(np.broadcast_to(np.asarray(info, dtype=float), (blk.tangent_dim,)))
        if blocks:
            info = np.concatenate(infos)
            self.priors.append(PriorConstraint(blocks, [b.value.copy() for b in blocks],
                                               np.diag(np.sqrt(info)), np.zeros(info.size)))

    def _active_process_sources(self):
        return [s for s in self.config.process_models if self.config.is_active(s)]

    def _complete_chains(self):
        cfg = self.config
        sources = self._active_process_sources()
        # the propagation model is applied last so its prediction wins on shared blocks
        sources.sort(key=lambda s: s == cfg.propagation_source)
        for prev, nxt in zip(self.states, self.states[1:]):
            for src in sources:
                if src in nxt.incoming:
                    continue
                buf = self.buffers[src]
                if not buf or buf[-1].stamp < nxt.stamp - SEGMENT_EPS:
                    continue
                chain = ProcessChain.from_buffer(src, buf, prev.stamp, nxt.stamp)
                model = cfg.process_models[src]
                if id(nxt) in self._fresh:
                    x, _, _, _ = model.propagate(model.gather(prev), chain.dts, chain.payloads,
                                                 self.statics)
                    for name, v in model.split(prev, x).items():
                        nxt[name].value = nxt[name].kind.project(v)
                compute_chain_weight(model, prev, chain, self.statics)
                nxt.incoming[src] = chain
                self._dirty = True

    def _check_chains(self):
        for prev, nxt in zip(self.states, self.states[1:]):
            for src in self._active_process_sources():
                if src not in nxt.incoming:
                    raise IncompleteChainError(
                        f"process source {src!r} does not yet cover ({prev.stamp}, {nxt.stamp}]")

    # ------------------------------------------------------------------ problem

    def build_problem(self) -> Problem:
        cfg = self.config
        residuals = list(self.priors)
        for s in self.states:
            for m in s.updates:
                if cfg.is_active(m.source):
                    residuals.append(UpdateResidual(cfg.update_models[m.source], s, self.statics, m))
        for prev, nxt in zip(self.states, self.states[1:]):
            for src, chain in nxt.incoming.items():
                if cfg.is_active(src):
                    residuals.append(ProcessResidual(cfg.process_models[src], prev, nxt, chain,
                                                     self.statics))
        touched = {id(b) for r in residuals for b in r.blocks}
        problem = Problem(statics=[b for b in self.statics.values() if id(b) in touched])
        for s in self.states:
            for b in s.blocks.values():
                problem.add_parameter(b)
        for r in residuals:
            problem.add_residual(r)
        return problem

    # ------------------------------------------------------------------ estimation

    def optimize_window(self, with_covariance=False) -> EstimateOutput:
        with self._lock:
            if not self.states:
                raise AssignmentError("no states to optimize")
            self._complete_chains()
            self._check_chains()
            if not self._dirty and self._last_output is not None:
                out = self._last_output
                out.metadata = dict(out.metadata, iterations=0, accepted_steps=0, cached=True)
                return out
            t0 = time.perf_counter()
            if self.config.marginalize:
                while len(self.states) > self.config.batch_size:
                    self.slide()
            problem = self.build_problem()
            if self._check_observability:
                # LM damping would mask a newly activated unobservable block
                neq, _ = normal_equations(problem, self.config.solver.loss, self.config.worker_count)
                CholeskyFactor(neq)
                self._check_observability = False
            report = optimize(problem, self.config.solver)
            elapsed = time.perf_counter() - t0
            self.last_report = report
            self._fresh.clear()
            self._dirty = False
            newest = self.states[-1]
            out = EstimateOutput(newest.stamp, newest.values(), metadata={
                "status": report.status,
                "iterations": len(report.iterations),
                "accepted_steps": report.accepted_steps,
                "initial_cost": report.initial_cost,
                "final_cost": report.final_cost,
                "solve_time": elapsed,
                "states": len(self.states),
                "dropped": self.counters.dropped,
            })
            if with_covariance:
                out.covariance = self.covariance()
            self._last_output = out
            return out

    def slide(self):
        """Marginalize the oldest state into the prior constraint."""
        with self._lock:
            if len(self.states) < 2:
                raise AssignmentError("cannot slide a window with fewer than two states")
            oldest = self.states[0]
            problem = self.build_problem()
            params_m = [b for b in oldest.blocks.values() if b.active]
            prior = None
            if params_m:
                prior = marginalize(problem, params_m, self.config.solver.loss)
            m_ids = {id(b) for b in params_m}
            self.priors = [p for p in self.priors if not any(id(b) in m_ids for b in p.blocks)]
            if prior is not None and prior.blocks:
                self.priors.append(prior)
            self.marginalized.append((oldest.stamp, oldest.values()))
            self.states.pop(0)
            self.states[0].incoming.clear()
            self._trim_buffers()
            self._dirty = True

    def _trim_buffers(self):
        t0 = self.states[0].stamp
        for src, buf in self.buffers.items():
            # keep the last sample at or before t0: it opens the first segment
            k = 0
            while k + 1 < len(buf) and buf[k + 1].stamp <= t0:
                k += 1
            if k:
                del buf[:k]

    def forward_propagate(self, to_stamp: float, source: Optional[str] = None) -> EstimateOutput:
        """Propagate the newest state through buffered samples up to ``to_stamp``."""
        with self._lock:
            if not self.states:
                raise AssignmentError("no states to propagate")
            newest = self.states[-1]
            if to_stamp < newest.stamp - SEGMENT_EPS:
                raise ValueError("cannot propagate backwards")
            src = source or self.config.propagation_source
            values = newest.values()
            propagated = dict(values)
            covered = newest.stamp
            truncated = False
            if src is not None and to_stamp > newest.stamp + SEGMENT_EPS:
                model = self.config.process_models[src]
                _, dts, payloads, covered = chain_segments(self.buffers[src], newest.stamp, to_stamp)
                if len(dts):
                    x, _, _, _ = model.propagate(model.gather(newest), dts, payloads, self.statics)
                    propagated.update(model.split(newest, x))
                truncated = covered < to_stamp - SEGMENT_EPS
            return EstimateOutput(newest.stamp, values, covered, propagated,
                                  metadata={"truncated": truncated, "requested_stamp": to_stamp})

    def covariance(self, block_names: Optional[Sequence[str]] = None, state_index: int = -1):
        """Block(s) of ``H^{-1}`` for a window state at the current linearization."""
        with self._lock:
            state = self.states[state_index]
            names = list(block_names) if block_names is not None else \
                [n for n, b in state.blocks.items() if b.active]
            problem = self.build_problem()
            neq, _ = normal_equations(problem, self.config.solver.loss, self.config.worker_count)
            return covariance_blocks(neq, [state[n] for n in names])

    def set_active(self, name: str, flag: bool):
        """Switch a static block, or a state block for all states, between optimized and constant."""
        with self._lock:
            if name in self.statics:
                self.statics[name].active = bool(flag)
            elif name in self.state_active:
                self.state_active[name] = bool(flag)
                for s in self.states:
                    s[name].active = bool(flag)
            else:
                raise ConfigurationError(f"no parameter named {name!r}")
            self._dirty = True
            self._check_observability |= bool(flag)

    def static_prior(self) -> Optional[PriorConstraint]:
        """Prior on statics alone, with state blocks factored out.

        Lets estimation stop and restart while keeping the accumulated
        information on the static parameters.
        """
        state_ids = {id(b) for s in self.states for b in s.blocks.values()}
        statics = [p for p in self.priors if any(id(b) not in state_ids for b in p.blocks)]
        if not statics:
            return None
        merged = _merge_priors(statics)
        return factor_out(merged, [b for b in merged.blocks if id(b) in state_ids])

    # ------------------------------------------------------------------ diagnostics

    def to_dot(self) -> str:
        """Residual/parameter adjacency as Graphviz DOT text."""
        problem = self.build_problem()
        lines = ["graph mhe {", "  rankdir=LR;"]
        for i, b in enumerate(problem.parameters):
            style = "box" if b.active else "box, style=dashed"
            lines.append(f'  p{i} [shape={style}, label="{problem.label(b)}"];')
        pid = {id(b): i for i, b in enumerate(problem.parameters)}
        for j, r in enumerate(problem.residuals):
            shape = "diamond" if isinstance(r, PriorConstraint) else "circle"
            lines.append(f'  r{j} [shape={shape}, label="{r.kind}"];')
            for b in r.blocks:
                lines.append(f"  r{j} -- p{pid[id(b)]};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    # ------------------------------------------------------------------ snapshots

    def snapshot(self) -> Dict:
        def meas_d(m):
            return {"source": m.source, "stamp": m.stamp, "payload": m.payload.tolist()}

        states = []
        for s in self.states:
            states.append({
                "stamp": s.stamp,
                "blocks": {n: {"value": b.value.tolist(), "active": b.active, "name": b.name}
                           for n, b in s.blocks.items()},
                "updates": [dict(meas_d(m), weight_sqrt=m.weight_sqrt.tolist()) for m in s.updates],
                "incoming": {src: {"t_start": c.t_start, "t_end": c.t_end,
                                   "measurements": [meas_d(m) for m in c.measurements],
                                   "dts": c.dts.tolist(),
                                   "weight_sqrt": c.weight_sqrt.tolist()}
                             for src, c in s.incoming.items()},
            })
        return {
            "version": 1,
            "statics": {n: {"kind": b.kind.to_json(), "value": b.value.tolist(), "active": b.active}
                        for n, b in self.statics.items()},
            "states": states,
            "priors": [p.to_dict([self._block_key(b) for b in p.blocks]) for p in self.priors],
            "buffers": {src: [meas_d(m) for m in buf] for src, buf in self.buffers.items()},
            "next_index": self._next_index,
            "state_active": self.state_active,
        }

    def _block_key(self, block):
        for n, b in self.statics.items():
            if b is block:
                return f"static:{n}"
        for i, s in enumerate(self.states):
            for n, b in s.blocks.items():
                if b is block:
                    return f"state:{i}:{n}"
        raise KeyError(block.name)

    def save_snapshot(self, path):
        with open(path, "w") as fh:
            json.dump(self.snapshot(), fh)

    @classmethod
    def from_snapshot(cls, config: EngineConfig, snap: Dict) -> "Engine":
        if snap.get("version") != 1:
            raise ValueError("unsupported snapshot version")
        eng = cls.__new__(cls)
        cls.__init__(eng, config)
        eng.priors = []
        for n, d in snap["statics"].items():
            kind = ManifoldKind.from_json(d["kind"])
            eng.statics[n] = ParameterBlock(kind, d["value"], d["active"], n)
        eng.state_active.update(snap["state_active"])
        for sd in snap["states"]:
            blocks = {n: ParameterBlock(config.state_blocks[n], bd["value"], bd["active"], bd["name"])
                      for n, bd in sd["blocks"].items()}
            st = State(sd["stamp"], blocks)
            st.updates = [UpdateMeasurement(u["source"], u["stamp"], u["payload"], u["weight_sqrt"])
                          for u in sd["updates"]]
            for src, cd in sd["incoming"].items():
                meas = [ProcessMeasurement(m["source"], m["stamp"], m["payload"])
                        for m in cd["measurements"]]
                st.incoming[src] = ProcessChain(src, cd["t_start"], cd["t_end"], meas,
                                                np.array(cd["dts"]), [m.payload for m in meas],
                                                np.array(cd["weight_sqrt"]))
            eng.states.append(st)

        def lookup(key):
            kind, rest = key.split(":", 1)
            if kind == "static":
                return eng.statics[rest]
            i, n = rest.split(":", 1)
            return eng.states[int(i)][n]

        eng.priors = [PriorConstraint.from_dict(d, lookup) for d in snap["priors"]]
        eng.buffers = {src: [ProcessMeasurement(m["source"], m["stamp"], m["payload"]) for m in buf]
                       for src, buf in snap["buffers"].items()}
        eng._next_index = snap["next_index"]
        eng.counters.attached = eng.counters.ingested = sum(len(s.updates) for s in eng.states)
        eng._dirty = True
        return eng

    @classmethod
    def load_snapshot(cls, config: EngineConfig, path) -> "Engine":
        with open(path) as fh:
            return cls.from_snapshot(config, json.load(fh))


def _merge_priors(priors: Sequence[PriorConstraint]) -> PriorConstraint:
    """Stack several priors into one over the union of their blocks."""
    blocks, lin = [], []
    for p in priors:
        for b, x in zip(p.blocks, p.linearization_point):
            if not any(b is q for q in blocks):
                blocks.append(b)
                lin.append(x)
    offsets = np.cumsum([0] + [b.tangent_dim for b in blocks])
    pos = {id(b): i for i, b in enumerate(blocks)}
    n = int(offsets[-1])
    H = np.zeros((n, n))
    g = np.zeros(n)
    for p in priors:
        cols = np.concatenate([np.arange(offsets[pos[id(b)]], offsets[pos[id(b)] + 1]) for b in p.blocks])
        # re-express each prior about the common linearization point
        J = p.J_p
        d = np.concatenate([b.kind.boxminus(lin[pos[id(b)]], x) for b, x in zip(p.blocks, p.linearization_point)])
        r0 = J @ d + p.offset
        H[np.ix_(cols, cols)] += J.T @ J
        g[cols] += -J.T @ r0
    return build_prior(H, g, blocks, lin)


# ---------------------------------------------------------------------- batch mode


@dataclass
class CalibrationReport:
    final_cost: float
    rms_by_kind: Dict[str, float]
    optimization: OptimizationReport
    states: int

    def to_dict(self):
        return {"final_cost": self.final_cost, "rms_by_kind": self.rms_by_kind,
                "states": self.states, "optimization": self.optimization.to_dict()}


def batch_calibrate(config: EngineConfig, measurements: Iterable[Measurement],
                    max_iterations: int = 50):
    """Ingest a whole dataset without marginalization and solve one batch problem.

    Returns ``(engine, report)``; calibrated statics are in ``engine.statics``.
    """
    opts = config.solver
    batch_cfg = EngineConfig(**{**config.__dict__, "marginalize": False,
                                "solver": SolverOptions(**{**opts.__dict__,
                                                           "max_iterations": max_iterations})})
    eng = Engine(batch_cfg)
    for m in measurements:
        eng.ingest(m)
    eng.flush_pending()
    eng._complete_chains()
    # drop a trailing state whose chains the dataset never closes
    while len(eng.states) > 1:
        try:
            eng._check_chains()
            break
        except IncompleteChainError:
            dropped = eng.states.pop()
            eng.counters.attached -= len(dropped.updates)
            for _ in dropped.updates:
                eng.counters.drop("unclosed_chain")
    problem = eng.build_problem()
    report = optimize(problem, batch_cfg.solver)
    eng.last_report = report
    eng._dirty = False
    sums: Dict[str, List[float]] = {}
    for r in problem.residuals:
        e = r.evaluate()[0]
        sums.setdefault(r.kind, []).extend((e * e).tolist())
    rms = {k: math.sqrt(sum(v) / len(v)) if v else 0.0 for k, v in sums.items()}
    return eng, CalibrationReport(report.final_cost, rms, report, len(eng.states))
