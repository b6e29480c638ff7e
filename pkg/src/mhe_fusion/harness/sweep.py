"""Parameter sweeps over batch size, thread count and sensor sets."""
from __future__ import annotations

from typing import Iterable, List, Optional, Sequence

from ..problem import ConfigurationError
from .config import SensorConfig, SimConfig
from .report import RunResult
from .runner import run_iekf, run_mhe
from .simulate import simulate

SWEEP_PARAMS = ("batch_size", "threads", "sensors")


def run_estimator(ds, estimator: str = "mhe") -> RunResult:
    if estimator == "mhe":
        log, metrics, _ = run_mhe(ds)
    elif estimator == "iekf":
        log, metrics, _ = run_iekf(ds)
    else:
        raise ConfigurationError(f"unknown estimator {estimator!r}")
    return RunResult(ds.config, log, metrics)


def sweep_configs(base: SimConfig, param: str, values: Sequence,
                  seeds: Optional[Iterable[int]] = None) -> List[SimConfig]:
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"cannot sweep {param!r}; choose one of {SWEEP_PARAMS}")
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    seeds = [base.seed] if seeds is None else list(seeds)
    out = []
    for v in values:
        if param == "sensors":
            sensors = v if isinstance(v, SensorConfig) else SensorConfig.parse(str(v))
            cfg = base.replace(sensors=sensors.__dict__)
        else:
            cfg = base.replace(**{f"estimator.{param}": int(v)})
        out += [cfg.replace(seed=s) for s in seeds]
    return out


def sweep(base: SimConfig, param: str, values: Sequence, estimator: str = "mhe",
          seeds: Optional[Iterable[int]] = None) -> List[RunResult]:
    """Run ``estimator`` for every value (and seed); datasets are shared across values when
    the swept parameter only affects the estimator."""
    results, cache = [], {}
    for cfg in sweep_configs(base, param, values, seeds):
        sim_key = cfg.replace(estimator=SimConfig().to_dict()["estimator"]).config_hash()
        if sim_key not in cache:
            cache[sim_key] = simulate(cfg)
        ds = cache[sim_key]
        if ds.config != cfg:
            ds = type(ds)(cfg, ds.stamps, ds.truth, ds.measurements, ds.landmarks, ds.statics_truth)
        results.append(run_estimator(ds, estimator))
    return results
