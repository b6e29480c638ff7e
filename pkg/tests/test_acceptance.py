"""Acceptance criteria AC1-AC12.

Each test records one PASS/FAIL line (printed in the terminal summary) and
asserts the criterion, including its runtime budget.
"""
import math
import time

import numpy as np
import pytest

from mhe_fusion.engine import Engine, EngineConfig, batch_calibrate
from mhe_fusion.harness import SimConfig, run_iekf, run_mhe, simulate
from mhe_fusion.harness.runner import engine_config
from mhe_fusion.manifold import Angle, Euclidean, ParameterBlock, UnitQuaternion
from mhe_fusion.marginalization import (build_prior, build_subproblem, factor_out, marginalize,
                                        schur_marginalize)
from mhe_fusion.models import (ConstVelProcess, DiffDriveProcess, JointOdometryUpdate,
                               LandmarkPoseUpdate, LinearUpdate, PositionUpdate,
                               constant_velocity_1d)
from mhe_fusion.problem import (ConfigurationError, FunctionResidual, ProcessChain,
                                ProcessMeasurement, ProcessResidual, Problem, State,
                                UpdateMeasurement, UpdateResidual, compute_chain_weight,
                                jacobian_check)
from mhe_fusion.solver import normal_equations

from test_engine import kalman, linear_config, linear_stream
from test_marginalization import linear_residual, projection_oracle


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0

    @property
    def ok(self):
        return self.elapsed < self.seconds

    def __str__(self):
        return f"{self.elapsed:.1f}s of {self.seconds:.0f}s"


def finish(acceptance, name, checks, detail, budget):
    ok = bool(checks) and budget.ok
    acceptance(name, ok, f"{detail}; runtime {budget}")
    assert checks, detail
    assert budget.ok, f"runtime {budget}"


# ---------------------------------------------------------------- AC1

def test_ac1_manifold_invariants(acceptance):
    n = 100_000
    rng = np.random.default_rng(1)
    worst = {}
    with Budget(5) as b:
        def small(dim):
            d = rng.normal(size=(n, dim))
            return d * (rng.uniform(0, 0.5, n) / np.linalg.norm(d, axis=1))[:, None]
        Q = UnitQuaternion()
        q = Q.project(rng.normal(size=(n, 4)))
        dq = small(3)
        worst["quat_round_trip"] = np.abs(Q.boxminus(Q.boxplus(q, dq), q) - dq).max()
        worst["quat_identity"] = np.abs(Q.boxplus(q, np.zeros((n, 3))) - q).max()
        E = Euclidean(3)
        x, dx = rng.normal(size=(n, 3)) * 100, small(3)
        worst["euclid_round_trip"] = np.abs(E.boxminus(E.boxplus(x, dx), x) - dx).max()
        worst["euclid_identity_bitwise"] = float(not np.array_equal(E.boxplus(x, np.zeros((n, 3))), x))
        A = Angle()
        a, da = rng.uniform(-math.pi, math.pi, (n, 1)), small(1)
        worst["angle_round_trip"] = np.abs(A.boxminus(A.boxplus(a, da), a) - da).max()
        chain = Q.identity()
        for d in rng.normal(size=(10_000, 3)) * 0.3:
            chain = Q.boxplus(chain, d)
        worst["quat_norm_after_1e4"] = abs(np.linalg.norm(chain) - 1)
    ok = (worst["quat_round_trip"] < 1e-9 and worst["euclid_round_trip"] < 1e-9
          and worst["angle_round_trip"] < 1e-9 and worst["quat_identity"] <= 1e-15
          and worst["euclid_identity_bitwise"] == 0 and worst["quat_norm_after_1e4"] < 1e-12)
    finish(acceptance, "AC1", ok, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), b)


# ---------------------------------------------------------------- AC2

def _pose(stamp, rng, prefix="", velocity=False):
    blocks = {prefix + "position": ParameterBlock(Euclidean(2), rng.normal(size=2)),
              prefix + "heading": ParameterBlock(Angle(), [rng.uniform(-3, 3)])}
    if velocity:
        blocks[prefix + "velocity"] = ParameterBlock(Euclidean(2), rng.normal(size=2))
    return State(stamp, blocks)


def _landmark_statics(rng):
    return {"landmark0.position": ParameterBlock(Euclidean(2), rng.normal(size=2) * 3),
            "landmark0.heading": ParameterBlock(Angle(), [rng.uniform(-3, 3)]),
            "offset": ParameterBlock(Euclidean(2), rng.normal(size=2) * 0.3)}


def test_ac2_model_jacobians(acceptance):
    rng = np.random.default_rng(2)
    worst = {}
    with Budget(10) as b:
        def update_cases():
            for _ in range(100):
                st = _pose(0.0, rng)
                meas = UpdateMeasurement("c", 0.0, [0, *rng.normal(size=3)], np.eye(3))
                yield "landmark_pose", UpdateResidual(LandmarkPoseUpdate(offset="offset"), st,
                                                      _landmark_statics(rng), meas)
            for _ in range(100):
                st = State(0.0, {**_pose(0.0, rng, "base_").blocks, **_pose(0.0, rng, "ee_").blocks})
                statics = {"arm_links": ParameterBlock(Euclidean(2), rng.uniform(0.5, 1.5, 2)),
                           "joint1_bias": ParameterBlock(Euclidean(1), rng.normal(size=1) * 0.1)}
                meas = UpdateMeasurement("arm", 0.0, rng.uniform(-2, 2, 2), np.eye(3))
                yield "joint_odometry", UpdateResidual(JointOdometryUpdate(), st, statics, meas)
            for _ in range(100):
                st = State(0.0, {"position": ParameterBlock(Euclidean(2), rng.normal(size=2))})
                meas = UpdateMeasurement("gps", 0.0, rng.normal(size=2), np.eye(2))
                yield "position", UpdateResidual(PositionUpdate(), st, {}, meas)
            for _ in range(100):
                st = State(0.0, {"x": ParameterBlock(Euclidean(2), rng.normal(size=2))})
                meas = UpdateMeasurement("lin", 0.0, rng.normal(size=1), np.eye(1))
                yield "linear", UpdateResidual(LinearUpdate("x", rng.normal(size=(1, 2))), st, {}, meas)

        def process_cases():
            specs = [("constvel", ConstVelProcess(), True, lambda: [rng.normal(), *rng.normal(size=2)]),
                     ("diffdrive", DiffDriveProcess(), False, lambda: rng.normal(size=2) * 3),
                     ("linear_cv", constant_velocity_1d("x", 0.5), None, lambda: rng.normal(size=1))]
            for name, model, vel, payload in specs:
                for _ in range(100):
                    buf = [ProcessMeasurement(name, k * 0.01, payload()) for k in range(11)]
                    chain = ProcessChain.from_buffer(name, buf, 0.0, 0.1)
                    if vel is None:
                        prev = State(0.0, {"x": ParameterBlock(Euclidean(2), rng.normal(size=2))})
                        nxt = State(0.1, {"x": ParameterBlock(Euclidean(2), rng.normal(size=2))})
                    else:
                        prev, nxt = _pose(0.0, rng, velocity=vel), _pose(0.1, rng, velocity=vel)
                    compute_chain_weight(model, prev, chain, {})
                    yield name, ProcessResidual(model, prev, nxt, chain, {})

        for name, res in [*update_cases(), *process_cases()]:
            worst[name] = max(worst.get(name, 0.0), jacobian_check(res))
    ok = max(worst.values()) < 1e-5
    finish(acceptance, "AC2", ok, "max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), b)


# ---------------------------------------------------------------- AC3

def test_ac3_linear_gaussian_equivalence(acceptance):
    with Budget(5) as b:
        meas = linear_stream(steps=50)
        x_kf, P_kf = kalman(meas)[-1]
        errs = {}
        for N in (2, 8):
            eng = Engine(linear_config(N))
            for m in meas:
                eng.ingest(m)
                if isinstance(m, UpdateMeasurement):
                    out = eng.optimize_window(with_covariance=True)
            errs[f"N={N}"] = max(np.abs(out.values["x"] - x_kf).max(), np.abs(out.covariance - P_kf).max())
        beng, _ = batch_calibrate(linear_config(1000), meas)
        errs["batch"] = max(np.abs(beng.states[-1]["x"].value - x_kf).max(),
                            np.abs(beng.covariance() - P_kf).max())
    ok = max(errs.values()) < 1e-8
    finish(acceptance, "AC3", ok, "max |MHE - KF| " + ", ".join(f"{k}: {v:.1e}" for k, v in errs.items()), b)


# ---------------------------------------------------------------- AC4

def test_ac4_marginalization_oracle(acceptance):
    rng = np.random.default_rng(4)
    worst, deficient = 0.0, 0
    with Budget(10) as b:
        for case in range(100):
            dm = int(rng.integers(1, 11))
            dl = int(rng.integers(1, 31 - dm))
            rank = int(rng.integers(1, dl + 1)) if case % 2 else dl
            deficient += rank < dl
            rows = dm + dl + int(rng.integers(0, 5))
            J_m, J_l = rng.normal(size=(rows, dm)), rng.normal(size=(rows, dl))
            if rank < dl:
                J_l = J_l[:, :rank] @ rng.normal(size=(rank, dl))
            e = rng.normal(size=rows)
            m = ParameterBlock(Euclidean(dm), rng.normal(size=dm), name="m")
            l1 = ParameterBlock(Euclidean(dl), rng.normal(size=dl), name="l")
            A = np.hstack([J_m, J_l])
            c = A @ np.concatenate([m.value, l1.value]) - e
            problem = Problem([linear_residual([m, l1], A, c)])
            H_ref, b_ref = projection_oracle(J_m, J_l, e)
            scale = max(1.0, np.abs(H_ref).max())
            H_star, b_star = schur_marginalize(build_subproblem(problem, [m]))
            worst = max(worst, np.abs(H_star - H_ref).max() / scale, np.abs(b_star - b_ref).max() / scale)
            # factor_out on a prior over (m, l) must give the same marginal
            H_full = A.T @ A
            prior = build_prior(H_full, -A.T @ e, [m, l1], scale=np.abs(H_full).max())
            fo = factor_out(prior, [m])
            worst = max(worst, np.abs(fo.H - H_ref).max() / scale, np.abs(fo.b - b_ref).max() / scale)
            # mean: where the gradient vanishes the marginal mean matches the joint optimum
            if rank == dl:
                x_joint = np.linalg.solve(H_full, -A.T @ e)
                mean = np.linalg.solve(H_star, b_star)
                worst = max(worst, np.abs(mean - x_joint[dm:]).max() / max(1, np.abs(x_joint).max()))
    ok = worst < 1e-9
    finish(acceptance, "AC4", ok, f"100 fixtures ({deficient} rank deficient), worst rel dev {worst:.1e}", b)


# ---------------------------------------------------------------- AC5

def test_ac5_prior_quadratic_reconstruction(acceptance):
    rng = np.random.default_rng(5)
    worst = 0.0
    with Budget(5) as b:
        for _ in range(50):
            dm, dl = int(rng.integers(1, 5)), int(rng.integers(1, 6))
            rows = dm + dl + 2
            J_m, J_l, e = rng.normal(size=(rows, dm)), rng.normal(size=(rows, dl)), rng.normal(size=rows)
            m = ParameterBlock(Euclidean(dm), rng.normal(size=dm))
            l1 = ParameterBlock(Euclidean(dl), rng.normal(size=dl))
            A = np.hstack([J_m, J_l])
            c = A @ np.concatenate([m.value, l1.value]) - e
            problem = Problem([linear_residual([m, l1], A, c)])
            x0 = l1.value.copy()
            prior = marginalize(problem, [m])
            e0 = prior.evaluate()[0]
            for _ in range(5):
                d = rng.normal(size=dl)
                l1.value = x0 + d
                # subproblem cost minimized over m, relative to its value at x0
                m_opt = lambda: np.linalg.lstsq(J_m, -(J_l @ (l1.value - x0) + e), rcond=None)[0]
                r = J_m @ m_opt() + J_l @ (l1.value - x0) + e
                l1.value = x0
                r0 = J_m @ m_opt() + e
                l1.value = x0 + d
                ep = prior.evaluate()[0]
                lhs, rhs = ep @ ep - e0 @ e0, r @ r - r0 @ r0
                worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
            l1.value = x0
    ok = worst < 1e-9
    finish(acceptance, "AC5", ok, f"worst rel deviation of ||e_p||^2 vs subproblem cost {worst:.1e}", b)


# ---------------------------------------------------------------- AC6 / AC7

@pytest.fixture(scope="module")
def default_datasets():
    return [simulate(SimConfig(seed=s)) for s in range(10)]


def test_ac6_mhe_vs_iekf(acceptance, default_datasets):
    with Budget(120) as b:
        mhe = [run_mhe(ds)[1] for ds in default_datasets]
        iekf = [run_iekf(ds)[1] for ds in default_datasets]
    wins = sum(m.rms_position_error <= k.rms_position_error for m, k in zip(mhe, iekf))
    c_mhe = float(np.median([m.consistency_rms for m in mhe]))
    c_iekf = float(np.median([k.consistency_rms for k in iekf]))
    gap = max(abs(m.rms_position_error - k.rms_position_error) for m, k in zip(mhe, iekf))
    ok = wins >= 8 and c_mhe < c_iekf
    finish(acceptance, "AC6", ok,
           f"MHE <= IEKF in {wins}/10 seeds (largest |diff| {gap:.1e} m); median consistency "
           f"MHE {c_mhe:.6f} vs IEKF {c_iekf:.6f} m", b)


def test_ac7_batch_size_consistency(acceptance, default_datasets):
    with Budget(180) as b:
        cons = {N: [run_mhe(ds, ds.config.replace(**{"estimator.batch_size": N}))[1].consistency_rms
                    for ds in default_datasets] for N in (2, 8)}
    med2, med8 = float(np.median(cons[2])), float(np.median(cons[8]))
    pct = 100.0 * (med2 - med8) / med2
    ok = med8 < med2
    finish(acceptance, "AC7", ok, f"median consistency N=2 {med2:.6f} m, N=8 {med8:.6f} m "
           f"({pct:+.3f}% improvement)", b)


# ---------------------------------------------------------------- AC8

def test_ac8_timing_scaling(acceptance):
    Ns = (2, 4, 8, 16, 32)
    with Budget(180) as b:
        ds = simulate(SimConfig(seed=0).replace(**{"trajectory.duration": 12.0, "blackouts": []}))
        med = [run_mhe(ds, ds.config.replace(**{"estimator.batch_size": N}))[1].solve_time_median
               for N in Ns]
    slope = float(np.polyfit(np.log(Ns), np.log(med), 1)[0])
    ok = slope < 1.5
    finish(acceptance, "AC8", ok, f"power-law exponent {slope:.2f}; median solve ms "
           + ", ".join(f"N={N}: {t * 1e3:.1f}" for N, t in zip(Ns, med)), b)


# ---------------------------------------------------------------- AC9

FIG3 = np.array([
    # c  m  x0 x1 x2 x3
    [1, 0, 1, 1, 1, 1],
    [0, 1, 1, 1, 1, 1],
    [1, 1, 1, 1, 0, 0],
    [1, 1, 1, 1, 1, 0],
    [1, 1, 0, 1, 1, 1],
    [1, 1, 0, 0, 1, 1],
], dtype=bool)


def _fig3_problem(n_states):
    rng = np.random.default_rng(9)
    c = ParameterBlock(Euclidean(2), [0.0, 0.0], name="c")
    m = ParameterBlock(Euclidean(2), [0.0, 0.0], name="m")
    xs = [ParameterBlock(Euclidean(2), [0.0, 0.0], name=f"x{k}") for k in range(n_states)]
    res = []
    for k, x in enumerate(xs):
        res.append(linear_residual([x, c], rng.normal(size=(2, 4)), rng.normal(size=2)))
        res.append(linear_residual([x, m], rng.normal(size=(2, 4)), rng.normal(size=2)))
        if k:
            res.append(linear_residual([xs[k - 1], x], rng.normal(size=(4, 4)), rng.normal(size=4)))
    return Problem(res, parameters=xs, statics=[c, m]), xs, (c, m)


def test_ac9_sparsity_structure(acceptance):
    with Budget(1) as b:
        problem, _, _ = _fig3_problem(4)
        neq, _ = normal_equations(problem)
        order = [neq.labels[i] for i in range(len(neq.blocks))]
        mask = neq.block_mask()
        exact = order == ["c", "m", "x0", "x1", "x2", "x3"] and np.array_equal(mask, FIG3)
        # one older state marginalized: prior over (x0, c, m); fill stays in that corner
        problem5, xs5, statics5 = _fig3_problem(5)
        prior = marginalize(problem5, [xs5[0]])
        kept = [r for r in problem5.residuals if not any(bl is xs5[0] for bl in r.blocks)]
        after = Problem([prior, *kept], parameters=xs5[1:], statics=list(statics5))
        mask2 = normal_equations(after)[0].block_mask()
        corner = np.zeros_like(FIG3)
        corner[:3, :3] = True
        fill_ok = np.array_equal(mask2 & ~corner, FIG3 & ~corner) and mask2[:3, :3].all()
    ok = exact and fill_ok
    finish(acceptance, "AC9", ok, f"pattern equals mask: {exact}; fill confined to the "
           f"first-state/static block: {fill_ok}", b)


# ---------------------------------------------------------------- AC10

def test_ac10_robust_loss(acceptance):
    wins, rows = 0, []
    with Budget(120) as b:
        for seed in range(10):
            cfg = SimConfig(seed=seed, outlier_fraction=0.1).replace(
                **{"trajectory.duration": 20.0, "blackouts": [[10.0, 13.0]]})
            ds = simulate(cfg)
            plain = run_mhe(ds)[1].rms_position_error
            robust = run_mhe(ds, cfg.replace(**{"estimator.huber": 1.0}))[1].rms_position_error
            wins += robust < plain
            rows.append(f"{robust:.3f}/{plain:.3f}")
    ok = wins >= 9
    finish(acceptance, "AC10", ok, f"Huber < plain in {wins}/10 seeds (Huber/plain m: {' '.join(rows)})", b)


# ---------------------------------------------------------------- AC11

def test_ac11_calibration(acceptance):
    with Budget(60) as b:
        cfg = SimConfig(scenario="arm", seed=0).replace(**{"trajectory.duration": 20.0, "blackouts": []})
        ds = simulate(cfg)
        eng, rep = batch_calibrate(engine_config(ds), ds.measurements)
        bias = float(eng.statics["joint1_bias"].value[0])
        offset = eng.statics["camera_offset"].value
    ok = abs(bias - 0.05) <= 0.005 and np.linalg.norm(offset - [0.1, 0.0]) <= 0.01
    finish(acceptance, "AC11", ok, f"bias {bias:.4f} rad (true 0.05), offset [{offset[0]:.4f}, "
           f"{offset[1]:.4f}] m (true [0.1, 0]), {rep.states} states", b)


# ---------------------------------------------------------------- AC12

def test_ac12_dual_process_models(acceptance):
    with Budget(60) as b:
        cfg = SimConfig(seed=0).replace(**{"trajectory.duration": 10.0, "blackouts": [[4.0, 6.0]],
                                          "sensors.wheels": True})
        ds = simulate(cfg)
        log, metrics, eng = run_mhe(ds)
        chains = {src for s in eng.states[1:] for src in s.incoming}
        accepted = chains == {"imu", "wheels"} and metrics.rms_position_error < 0.2
        try:
            run_iekf(ds)
            rejected, msg = False, "IEKF accepted the configuration"
        except ConfigurationError as exc:
            rejected, msg = "single process model" in str(exc), str(exc)
    ok = accepted and rejected
    finish(acceptance, "AC12", ok, f"MHE chains {sorted(chains)}, rms {metrics.rms_position_error:.3f} m; "
           f"IEKF: {msg[:80]}", b)
