"""Command-line entry point: ``mhe-fusion {simulate,run,sweep,report}``.

Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 estimator failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness.config import SimConfig, load_config
from .harness.report import ReportError, load_run, report, save_run, summary
from .harness.runner import EstimatorError
from .harness.simulate import Dataset, simulate
from .harness.sweep import SWEEP_PARAMS, run_estimator, sweep
from .problem import ConfigurationError

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ESTIMATOR = 0, 1, 2, 3


def _config(args) -> SimConfig:
    cfg = load_config(args.config) if args.config else SimConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_simulate(args):
    cfg = _config(args)
    ds = simulate(cfg)
    ds.save(args.out)
    print(json.dumps({"out": str(args.out), "config_hash": cfg.config_hash(), "counts": ds.counts()}))


def cmd_run(args):
    if args.data:
        ds = Dataset.load(args.data)
        if args.config:
            # estimator settings come from the given config; the data fixes the rest
            est = load_config(args.config).to_dict()["estimator"]
            ds = Dataset(ds.config.replace(estimator=est), ds.stamps, ds.truth, ds.measurements,
                         ds.landmarks, ds.statics_truth)
    else:
        ds = simulate(_config(args))
    result = run_estimator(ds, args.estimator)
    save_run(result, args.out)
    report([result], args.out, "json")
    report([result], args.out, "csv")
    print(json.dumps(summary(result)))


def cmd_sweep(args):
    base = _config(args)
    seeds = range(base.seed, base.seed + args.seeds)
    results = sweep(base, args.param, args.values, args.estimator, seeds)
    out = Path(args.out)
    for i, r in enumerate(results):
        save_run(r, out / f"run{i:03d}")
    report(results, out, args.format)
    for r in results:
        s = summary(r)
        print(f"{args.param}={_value(r, args.param)} seed={s['seed']} "
              f"pos={s['rms_position_error']:.4f} cons={s['consistency_rms']:.4f} "
              f"solve={s['timing']['solve_time_median'] * 1e3:.2f}ms")


def _value(result, param):
    if param == "sensors":
        return result.config.sensors.label()
    return getattr(result.config.estimator, param)


def cmd_report(args):
    results = [load_run(d) for d in args.runs]
    for p in report(results, args.out, args.format):
        print(p)


def build_parser():
    ap = argparse.ArgumentParser(prog="mhe-fusion", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="run one estimator on a dataset")
    p.add_argument("--estimator", choices=("mhe", "iekf"), default="mhe")
    p.add_argument("--config", help="config file (estimator settings when --data is given)")
    p.add_argument("--data", help="dataset directory from 'simulate'; simulated on the fly if absent")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="sweep one parameter over several values")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", nargs="+", required=True,
                   help="integers, or sensor sets such as camera camera+camera2")
    p.add_argument("--estimator", choices=("mhe", "iekf"), default="mhe")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per value")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="write reports for saved runs")
    p.add_argument("--format", choices=("csv", "json"), required=True)
    p.add_argument("--runs", nargs="+", required=True, help="run directories from 'run' or 'sweep'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimatorError as exc:
        print(f"estimator failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR
    except (ReportError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
