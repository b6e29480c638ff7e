import csv
import json
import os

import numpy as np
import pytest

from mhe_fusion.cli import main
from mhe_fusion.harness import (RunResult, SimConfig, load_config, load_run, report, run_iekf,
                                run_mhe, save_run, simulate, sweep)
from mhe_fusion.harness.config import SensorConfig
from mhe_fusion.harness.report import STEP_COLUMNS, ReportError, sensor_matrix, summary
from mhe_fusion.harness.runner import engine_config, model_setup
from mhe_fusion.harness.simulate import Dataset
from mhe_fusion.problem import (ConfigurationError, ProcessResidual, State, UpdateResidual,
                                compute_chain_weight)
from mhe_fusion.engine import Engine

SHORT = {"trajectory.duration": 8.0, "blackouts": [[3.0, 4.0]]}


def short_config(**kw):
    return SimConfig().replace(**{**SHORT, **kw})


def zero_noise(cfg):
    return cfg.replace(noise={k: 0.0 for k in cfg.to_dict()["noise"]})


# ---------------------------------------------------------------- config

def test_config_defaults_and_hash():
    a, b = SimConfig(), SimConfig()
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    assert a.replace(seed=1).config_hash() != a.config_hash()
    assert a.replace(**{"estimator.batch_size": 8}).estimator.batch_size == 8


@pytest.mark.parametrize("change", [
    {"rates.process": 0.0}, {"rates.camera": 30.0}, {"estimator.batch_size": 1},
    {"outlier_fraction": 1.5}, {"scenario": "boat"}, {"blackouts": [[5.0, 4.0]]},
    {"sensors": {"camera": False, "camera2": False, "gps": False, "wheels": True}},
])
def test_config_validation(change):
    with pytest.raises(ConfigurationError):
        SimConfig().replace(**change)


def test_load_config_toml_and_json(tmp_path):
    (tmp_path / "a.toml").write_text('seed = 3\n[estimator]\nbatch_size = 8\n[sensors]\ngps = true\n')
    cfg = load_config(tmp_path / "a.toml")
    assert (cfg.seed, cfg.estimator.batch_size, cfg.sensors.label()) == (3, 8, "camera+gps")
    (tmp_path / "a.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "a.json").config_hash() == cfg.config_hash()
    (tmp_path / "bad.toml").write_text("[estimator]\nbatchsize = 8\n")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "bad.toml")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.toml")


def test_sensor_labels():
    s = SensorConfig.parse("camera + gps")
    assert s.label() == "camera+gps" and not s.camera2
    with pytest.raises(ConfigurationError):
        SensorConfig.parse("lidar")


# ---------------------------------------------------------------- simulate

def test_simulation_is_deterministic():
    cfg = short_config(seed=4)
    a, b = simulate(cfg), simulate(cfg)
    assert len(a.measurements) == len(b.measurements)
    for ma, mb in zip(a.measurements, b.measurements):
        assert (ma.source, ma.stamp) == (mb.source, mb.stamp)
        assert np.array_equal(ma.payload, mb.payload)
    for k in a.truth:
        assert np.array_equal(a.truth[k], b.truth[k])


def test_sixty_seconds_of_camera_updates():
    ds = simulate(SimConfig(blackouts=[]))
    stamps = {m.stamp for m in ds.measurements if m.source == "camera"}
    assert abs(len(stamps) - 600) <= 1


def test_streams_time_ordered():
    ds = simulate(short_config(sensors={"camera": True, "camera2": True, "gps": True, "wheels": True}))
    stamps = [m.stamp for m in ds.measurements]
    assert stamps == sorted(stamps)
    assert set(ds.counts()) == {"imu", "wheels", "camera", "camera2", "gps"}


@pytest.mark.parametrize("scenario", ["planar", "arm"])
def test_zero_noise_residuals_vanish_at_truth(scenario):
    cfg = zero_noise(short_config(scenario=scenario, sensors={"camera": True, "camera2": True,
                                                              "gps": True, "wheels": True}))
    ds = simulate(cfg)
    setup = model_setup(ds)
    for n, blk in setup.statics.items():
        if n in ds.statics_truth:
            blk.value = np.asarray(ds.statics_truth[n], dtype=float)
    eng = Engine(engine_config(ds, setup, marginalize=False))
    for m in ds.measurements:
        eng.ingest(m)
    eng._complete_chains()
    for s in eng.states:
        for name, blk in s.blocks.items():
            blk.value = np.atleast_1d(np.asarray(ds.truth[name][int(round(s.stamp * 100))], dtype=float))
    worst = {}
    for r in eng.build_problem().residuals:
        if isinstance(r, (UpdateResidual, ProcessResidual)):
            worst[r.kind] = max(worst.get(r.kind, 0.0), np.abs(r.evaluate()[0]).max())
    # planar wheel odometry only matches the sinusoidal truth to discretization order
    wheels = worst.pop("wheels") if scenario == "planar" else 0.0
    assert wheels < 1e-3
    assert max(worst.values()) < 1e-6


def test_dataset_save_load(tmp_path):
    ds = simulate(short_config(seed=2))
    ds.save(tmp_path)
    back = Dataset.load(tmp_path)
    assert back.config == ds.config and len(back.measurements) == len(ds.measurements)
    assert all(np.array_equal(a.payload, b.payload) for a, b in zip(ds.measurements, back.measurements))


# ---------------------------------------------------------------- runners

@pytest.mark.parametrize("runner", [run_mhe, run_iekf])
def test_zero_noise_run_is_exact(runner):
    ds = simulate(zero_noise(short_config()).replace(**{"noise.initial": 0.0}))
    _, metrics, _ = runner(ds)
    assert metrics.rms_position_error < 1e-6


def test_run_determinism_across_threads():
    ds = simulate(short_config(seed=5))
    a, _, _ = run_mhe(ds)
    b, _, _ = run_mhe(ds, ds.config.replace(**{"estimator.threads": 3}))
    c, _, _ = run_mhe(ds)
    np.testing.assert_array_equal(a.position, c.position)
    np.testing.assert_allclose(a.position, b.position, atol=1e-12, rtol=0, equal_nan=True)


def test_iekf_rejects_two_process_models_on_one_portion():
    ds = simulate(short_config(sensors={"camera": True, "camera2": False, "gps": False, "wheels": True}))
    with pytest.raises(ConfigurationError, match="single process model"):
        run_iekf(ds)
    _, metrics, _ = run_mhe(ds)
    assert metrics.rms_position_error < 0.5


def test_batch_size_sweep_one_report_each():
    results = sweep(short_config(), "batch_size", [2, 4, 8, 16])
    assert [r.config.estimator.batch_size for r in results] == [2, 4, 8, 16]
    assert all(r.metrics.steps > 0 for r in results)


def test_second_camera_reduces_error():
    base = SimConfig()
    single = run_mhe(simulate(base))[1].rms_position_error
    both = run_mhe(simulate(base.replace(**{"sensors.camera2": True})))[1].rms_position_error
    assert both < single


# ---------------------------------------------------------------- reports

@pytest.fixture(scope="module")
def results():
    out = []
    for sensors in ("camera", "camera+gps"):
        cfg = short_config(sensors=SensorConfig.parse(sensors).__dict__)
        ds = simulate(cfg)
        log, metrics, _ = run_mhe(ds)
        out.append(RunResult(cfg, log, metrics))
    return out


def test_csv_report_rows(results, tmp_path):
    paths = report(results, tmp_path, "csv")
    names = sorted(p.name for p in paths)
    assert "matrix.csv" in names and len(names) == 3
    with open(paths[0]) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == STEP_COLUMNS
    assert len(rows) - 1 == len(results[0].log.stamps)


def test_json_summary_schema(results, tmp_path):
    paths = report(results, tmp_path, "json")
    s = json.loads(paths[0].read_text())
    assert {"schema_version", "config_hash", "rms_position_error", "rms_heading_error",
            "consistency_rms", "timing"} <= set(s)
    assert set(s["timing"]) == {"solve_time_mean", "solve_time_median", "solve_time_max"}
    assert all(v >= 0 for k, v in s.items() if k.startswith("rms") or k == "consistency_rms")
    assert len(json.loads((tmp_path / "summary.json").read_text())["runs"]) == 2


def test_sensor_matrix_rows(results):
    rows = sensor_matrix(results + results)
    assert [r["sensors"] for r in rows] == ["camera", "camera+gps"] and rows[0]["runs"] == 2


def test_unwritable_report_path(results, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ReportError):
        report(results, blocker / "sub", "json")
    with pytest.raises(ValueError):
        report([], tmp_path, "json")


def test_run_save_load(results, tmp_path):
    save_run(results[0], tmp_path / "r")
    back = load_run(tmp_path / "r")
    assert summary(back) == summary(results[0])


# ---------------------------------------------------------------- CLI

def test_cli_round_trip(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('[trajectory]\nduration = 4.0\n')
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    assert main(["run", "--estimator", "iekf", "--data", str(tmp_path / "data"),
                 "--out", str(tmp_path / "run")]) == 0
    assert main(["report", "--format", "csv", "--runs", str(tmp_path / "run"),
                 "--out", str(tmp_path / "rep")]) == 0
    assert main(["sweep", "--param", "batch_size", "--values", "2", "3", "--config", str(cfg),
                 "--out", str(tmp_path / "sw")]) == 0
    assert len(list((tmp_path / "sw").glob("*.json"))) == 3


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[rates]\nprocess = -1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    cfg = tmp_path / "c.toml"
    cfg.write_text('[trajectory]\nduration = 4.0\n')
    main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "data")])
    lines = (tmp_path / "data" / "measurements.ndjson").read_text().splitlines()
    for i, line in enumerate(lines):
        rec = json.loads(line)
        if rec["source"] == "camera":
            rec["payload"][1] = float("nan")
            lines[i] = json.dumps(rec)
            break
    (tmp_path / "data" / "measurements.ndjson").write_text("\n".join(lines) + "\n")
    assert main(["run", "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r")]) == 3
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert main(["run", "--config", str(cfg), "--out", str(blocker / "r")]) == 1
