import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhe_fusion.engine import Engine, EngineConfig
from mhe_fusion.manifold import Angle, Euclidean, ParameterBlock
from mhe_fusion.models import (ConstVelNoise, ConstVelProcess, DiffDriveParams, DiffDriveProcess,
                               JointOdometryUpdate, LandmarkPoseUpdate, PlanarPose, PositionUpdate,
                               arm_forward_kinematics, constvel_propagate, diffdrive_propagate,
                               load_model_params)
from mhe_fusion.problem import (ConfigurationError, ProcessChain, ProcessMeasurement,
                                ProcessResidual, State, UpdateMeasurement, UpdateResidual,
                                compute_chain_weight, jacobian_check)


def pose_state(stamp, p, psi, prefix="", v=None):
    blocks = {prefix + "position": ParameterBlock(Euclidean(2), p),
              prefix + "heading": ParameterBlock(Angle(), [psi])}
    if v is not None:
        blocks[prefix + "velocity"] = ParameterBlock(Euclidean(2), v)
    return State(stamp, blocks)


def landmark_statics(lp, lpsi, offset=None):
    s = {"landmark0.position": ParameterBlock(Euclidean(2), lp),
         "landmark0.heading": ParameterBlock(Angle(), [lpsi])}
    if offset is not None:
        s["cam_offset"] = ParameterBlock(Euclidean(2), offset)
    return s


# ---------------------------------------------------------------- diff drive

def test_diffdrive_zero_speed_is_stationary():
    params = DiffDriveParams()
    pose, P = diffdrive_propagate(PlanarPose([1.0, 2.0], 0.3), np.zeros((11, 2)), np.linspace(0, 1, 11),
                                  params)
    np.testing.assert_array_equal(pose.position, [1.0, 2.0])
    assert pose.heading == pytest.approx(0.3, abs=1e-15)
    np.testing.assert_allclose(np.diag(P), [params.position_var] * 2 + [params.heading_var], rtol=1e-12)


def test_diffdrive_straight():
    pose, _ = diffdrive_propagate(PlanarPose([0, 0], 0.0), [[1.0, 1.0]], [1.0],
                                  DiffDriveParams(wheel_radius=0.1), t0=0.0)
    np.testing.assert_allclose(pose.position, [0.1, 0.0], atol=1e-15)
    assert pose.heading == 0.0


def test_diffdrive_spin_in_place():
    pose, _ = diffdrive_propagate(PlanarPose([0, 0], 0.0), [[-1.0, 1.0]], [1.0],
                                  DiffDriveParams(wheel_radius=0.1, track_width=0.5), t0=0.0)
    assert pose.heading == pytest.approx(0.4, abs=1e-15)
    np.testing.assert_allclose(pose.position, [0.0, 0.0], atol=1e-15)


def test_diffdrive_moving_noise_scale():
    params = DiffDriveParams()
    _, Ps = diffdrive_propagate(PlanarPose([0, 0], 0.0), [[0.0, 0.0]], [1.0], params, t0=0.0)
    _, Pm = diffdrive_propagate(PlanarPose([0, 0], 0.0), [[0.0, 0.0005]], [1.0], params, t0=0.0)
    _, Pt = diffdrive_propagate(PlanarPose([0, 0], 0.0), [[0.0, 0.01]], [1.0], params, t0=0.0)
    np.testing.assert_allclose(Pm, Ps)  # below the 1e-3 rad/s threshold
    assert np.trace(Pt) >= params.slip_noise_scale_moving * np.trace(Ps) * (1 - 1e-9)


def test_diffdrive_params_validation():
    with pytest.raises(ValueError):
        DiffDriveParams(wheel_radius=0.0)
    with pytest.raises(ValueError):
        DiffDriveParams(slip_noise_scale_moving=0.5, slip_noise_scale_stationary=1.0)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=30),
       st.floats(-math.pi, math.pi))
def test_diffdrive_covariance_trace_non_decreasing(wheels, psi):
    model = DiffDriveProcess()
    x = np.array([0.3, -0.2, psi])
    traces = [0.0]
    for k in range(1, len(wheels) + 1):
        _, _, _, P = model.propagate(x, np.full(k, 0.01), np.array(wheels[:k]), {})
        traces.append(np.trace(P))
    assert all(b >= a - 1e-15 for a, b in zip(traces, traces[1:]))


# ---------------------------------------------------------------- constant velocity

def test_constvel_examples():
    p, psi, v = constvel_propagate([0, 0], 0.0, [1.0, 0.0], 0.1)
    np.testing.assert_allclose(p, [0.1, 0.0], atol=1e-15)
    p, psi, v = constvel_propagate([0, 0], 0.0, [0, 0], 1.0, accel=(1.0, 0.0), substeps=100)
    # semi-implicit: v_k = k h, p = h * sum v_k
    h = 0.01
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(p, [h * h * sum(range(1, 101)), 0.0], atol=1e-12)
    assert p[0] == pytest.approx(0.505)
    p, psi, v = constvel_propagate([0, 0], 0.0, [0, 0], 1.0, yaw_rate=math.pi / 2, substeps=10)
    assert psi == pytest.approx(math.pi / 2)
    np.testing.assert_array_equal(p, [0.0, 0.0])


def test_constvel_body_frame_acceleration():
    p, psi, v = constvel_propagate([0, 0], math.pi / 2, [0, 0], 1.0, accel=(1.0, 0.0), substeps=10)
    np.testing.assert_allclose(v, [0.0, 1.0], atol=1e-12)


# ---------------------------------------------------------------- landmark update

def test_landmark_update_examples():
    st_ = pose_state(0.0, [0.0, 0.0], 0.0)
    statics = landmark_statics([1.0, 0.0], 0.0)
    model = LandmarkPoseUpdate()
    e, _ = model.error(st_, statics, UpdateMeasurement("cam", 0.0, [0, 1.0, 0.0, 0.0], np.eye(3)))
    np.testing.assert_allclose(e, 0.0, atol=1e-15)
    e, _ = model.error(st_, statics, UpdateMeasurement("cam", 0.0, [0, 1.1, 0.0, 0.0], np.eye(3)))
    np.testing.assert_allclose(np.abs(e), [0.1, 0.0, 0.0], atol=1e-12)


def test_landmark_seed_inverts_measurement():
    statics = landmark_statics([2.0, 1.0], 0.5, offset=[-0.3, 0.1])
    model = LandmarkPoseUpdate(offset="cam_offset")
    st_ = pose_state(0.0, [0.4, -0.7], 1.2)
    rel_p, rel_h = model.predict(np.array([0.4, -0.7]), 1.2, np.array([2.0, 1.0]), 0.5,
                                 np.array([-0.3, 0.1]))
    meas = UpdateMeasurement("cam", 0.0, [0, *rel_p, rel_h], np.eye(3))
    seed = model.seed(meas, statics)
    np.testing.assert_allclose(seed["position"], [0.4, -0.7], atol=1e-12)
    np.testing.assert_allclose(seed["heading"], [1.2], atol=1e-12)
    e, _ = model.error(st_, statics, meas)
    np.testing.assert_allclose(e, 0.0, atol=1e-12)


@pytest.mark.parametrize("with_offset", [False, True])
def test_landmark_jacobians(with_offset):
    rng = np.random.default_rng(1)
    model = LandmarkPoseUpdate(offset="cam_offset" if with_offset else None)
    for _ in range(100):
        st_ = pose_state(0.0, rng.normal(size=2), rng.uniform(-3, 3))
        statics = landmark_statics(rng.normal(size=2) * 3, rng.uniform(-3, 3),
                                   rng.normal(size=2) * 0.3 if with_offset else None)
        meas = UpdateMeasurement("cam", 0.0, [0, *rng.normal(size=2), rng.uniform(-1, 1)], np.eye(3))
        assert jacobian_check(UpdateResidual(model, st_, statics, meas)) < 1e-5


# ---------------------------------------------------------------- arm

def test_arm_forward_kinematics_example():
    p, theta, _, _ = arm_forward_kinematics([0, 0], 0.0, [0.0, math.pi / 2], [1.0, 1.0])
    np.testing.assert_allclose(p, [1.0, 1.0], atol=1e-15)
    assert theta == pytest.approx(math.pi / 2)


def arm_setup(rng, bias=0.0):
    base = pose_state(0.0, rng.normal(size=2), rng.uniform(-3, 3), prefix="base_")
    q = rng.uniform(-1.5, 1.5, size=2)
    lengths = np.array([1.0, 0.8])
    p, th, _, _ = arm_forward_kinematics(base["base_position"].value, base["base_heading"].value[0],
                                         q + [0.0, bias], lengths)
    ee = pose_state(0.0, p, th, prefix="ee_")
    state = State(0.0, {**base.blocks, **ee.blocks})
    statics = {"arm_links": ParameterBlock(Euclidean(2), lengths),
               "joint1_bias": ParameterBlock(Euclidean(1), [bias])}
    return state, statics, UpdateMeasurement("joints", 0.0, q, np.eye(3))


def test_joint_odometry_consistent_is_zero():
    rng = np.random.default_rng(2)
    model = JointOdometryUpdate()
    for bias in (0.0, 0.05):
        state, statics, meas = arm_setup(rng, bias)
        e, _ = model.error(state, statics, meas)
        np.testing.assert_allclose(e, 0.0, atol=1e-12)
    statics["joint1_bias"].value = np.array([0.0])
    assert np.linalg.norm(model.error(state, statics, meas)[0]) > 1e-3


def test_joint_odometry_jacobians():
    rng = np.random.default_rng(3)
    model = JointOdometryUpdate()
    for _ in range(100):
        state, statics, meas = arm_setup(rng, rng.normal() * 0.1)
        state["ee_position"].value = state["ee_position"].value + rng.normal(size=2) * 0.1
        assert jacobian_check(UpdateResidual(model, state, statics, meas)) < 1e-5


def test_joint_odometry_wrong_angle_count():
    rng = np.random.default_rng(4)
    state, statics, _ = arm_setup(rng)
    with pytest.raises(ConfigurationError):
        JointOdometryUpdate().error(state, statics, UpdateMeasurement("j", 0.0, [0.1], np.eye(3)))


# ---------------------------------------------------------------- process residual Jacobians

def chain_fixture(rng, source, payload_fn, n=10, dt=0.01):
    buf = [ProcessMeasurement(source, k * dt, payload_fn()) for k in range(n + 1)]
    return ProcessChain.from_buffer(source, buf, 0.0, n * dt)


def test_constvel_process_jacobians():
    rng = np.random.default_rng(5)
    model = ConstVelProcess()
    for _ in range(100):
        chain = chain_fixture(rng, "imu", lambda: [rng.normal(), *rng.normal(size=2)])
        prev = pose_state(0.0, rng.normal(size=2), rng.uniform(-3, 3), v=rng.normal(size=2))
        nxt = pose_state(0.1, rng.normal(size=2), rng.uniform(-3, 3), v=rng.normal(size=2))
        compute_chain_weight(model, prev, chain, {})
        assert jacobian_check(ProcessResidual(model, prev, nxt, chain, {})) < 1e-5


def test_diffdrive_process_jacobians():
    rng = np.random.default_rng(6)
    model = DiffDriveProcess()
    for _ in range(100):
        chain = chain_fixture(rng, "wheels", lambda: rng.normal(size=2) * 3)
        prev = pose_state(0.0, rng.normal(size=2), rng.uniform(-3, 3))
        nxt = pose_state(0.1, rng.normal(size=2), rng.uniform(-3, 3))
        compute_chain_weight(model, prev, chain, {})
        assert jacobian_check(ProcessResidual(model, prev, nxt, chain, {})) < 1e-5


# ---------------------------------------------------------------- stationary enforcement

def stationary_motion(params):
    """Largest step of the optimized base position with zero wheel speeds."""
    cfg = EngineConfig(state_blocks={"position": Euclidean(2), "heading": Angle()},
                       update_models={"gps": PositionUpdate("position")},
                       process_models={"wheels": DiffDriveProcess(params)}, spawn_sources={"gps"},
                       batch_size=5, initial_values={"position": [0, 0], "heading": [0.0]},
                       initial_info={"position": [1e4, 1e4], "heading": [1e4]}, use_seed=False)
    eng = Engine(cfg)
    rng = np.random.default_rng(0)
    last, worst = None, 0.0
    for k in range(201):
        t = k * 0.01
        eng.ingest(ProcessMeasurement("wheels", t, [0.0, 0.0]))
        if k % 10 == 0:
            eng.ingest(UpdateMeasurement("gps", t, rng.normal(size=2) * 0.01, np.eye(2) / 0.01))
            p = eng.optimize_window().values["position"]
            if last is not None:
                worst = max(worst, np.linalg.norm(p - last))
            last = p
    return worst


def test_stationary_base_is_pinned():
    tight = DiffDriveParams(slip_noise_scale_moving=1.0, slip_noise_scale_stationary=1e-8)
    assert stationary_motion(tight) < 1e-6
    loose = DiffDriveParams(slip_noise_scale_moving=1.0, slip_noise_scale_stationary=1.0)
    assert stationary_motion(loose) > 1e-6


def test_load_model_params():
    out = load_model_params({"diffdrive": {"wheel_radius": 0.2}, "constvel": {"gyro_var": 1e-3}})
    assert out["diffdrive"].wheel_radius == 0.2 and out["constvel"].gyro_var == 1e-3
    with pytest.raises(ConfigurationError):
        load_model_params({"imu": {}})
