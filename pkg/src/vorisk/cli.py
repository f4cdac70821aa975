"""Command line interface: simulate, monitor, calibrate, evaluate, bench.

Exit codes: 0 success, 2 configuration error, 3 backend divergence
(partial logs are kept), 4 malformed input file.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import grid_from_config, load_config, plan_from_config
from .errors import (ConfigError, InsufficientCalibrationError,
                     MalformedRecordError)
from .framelog import read_calibration, write_calibration
from .risk import RiskConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MALFORMED = 4


def _risk_config_from_calibration(calib: dict) -> RiskConfig:
    return RiskConfig(
        lambda_weight=calib.get("lambda_weight", 1.0),
        clamp=calib.get("clamp", 3.0),
        norm_window=int(calib.get("norm_window", 75)),
        warmup_samples=int(calib.get("warmup_samples", 10)),
        smooth_window=int(calib.get("smooth_window", 7)),
        trend_frames=int(calib.get("trend_frames", 4)),
        trend_threshold=calib.get("trend_threshold", 0.0),
        min_features=int(calib.get("min_features", 20)),
    )


def _load_threshold(path: str | None) -> tuple[float | None, dict | None]:
    if path is None:
        return None, None
    with open(path, encoding="utf-8") as fp:
        calib = read_calibration(fp)
    return calib["threshold"], calib


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    threshold, calib = _load_threshold(args.calibration)
    if args.grid:
        from .pipeline import run_grid
        grid_cfg = load_config(args.grid)
        specs = grid_from_config(grid_cfg)
        base_plan = plan_from_config(cfg, seed_override=args.seed)
        if calib is not None:
            base_plan.risk = _risk_config_from_calibration(calib)
        outcomes = run_grid(base_plan, specs, args.out, threshold,
                            jobs=args.jobs)
        diverged = sum(1 for _, _, d in outcomes if d)
        print(f"grid: {len(outcomes)} runs, "
              f"{sum(1 for _, f, _ in outcomes if f)} failed, "
              f"{diverged} diverged -> {args.out}")
        return EXIT_OK
    from .pipeline import simulate_run
    plan = plan_from_config(cfg, seed_override=args.seed)
    if calib is not None:
        plan.risk = _risk_config_from_calibration(calib)
    out_dir = os.path.join(args.out, plan.tag)
    result = simulate_run(plan, out_dir, threshold)
    print(f"run {result.tag}: {result.n_frames} frames, "
          f"failed={result.failed}, diverged={result.diverged} "
          f"-> {out_dir}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_monitor(args) -> int:
    from .pipeline import monitor_to_csv
    threshold, calib = _load_threshold(args.calibration)
    risk_config = (_risk_config_from_calibration(calib)
                   if calib else RiskConfig())
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "risk.csv")
    records = monitor_to_csv(args.log, out_path, risk_config, threshold)
    print(f"monitored {len(records)} frames -> {out_path}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .pipeline import calibrate_logs
    cfg = load_config(args.config) if args.config else {}
    risk_config = plan_from_config(cfg).risk
    threshold, tau_d, n = calibrate_logs(args.logs, risk_config,
                                         quantile=args.quantile)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fp:
        write_calibration(fp, threshold, args.quantile, n, risk_config,
                          trend_threshold=tau_d)
    print(f"threshold {threshold!r} trend {tau_d!r} from {n} samples "
          f"-> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate_dir, write_report
    threshold, _ = _load_threshold(args.calibration)
    if threshold is None:
        raise ConfigError("evaluate requires --calibration")
    report = evaluate_dir(args.runs, threshold)
    write_report(report, args.out)
    for name, auc in report.auc_per_indicator.items():
        print(f"auc {name}: {auc:.4f}")
    print(f"report -> {args.out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .pipeline import bench, write_bench_report
    cfg = load_config(args.config) if args.config else {}
    plan = plan_from_config(cfg, seed_override=args.seed)
    results = bench(plan)
    write_bench_report(results, sys.stdout)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.txt"), "w",
                  encoding="utf-8") as fp:
            write_bench_report(results, fp)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vorisk",
        description="Risk monitoring for sliding-window visual odometry",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run scene->backend->risk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--calibration", default=None)
    p.add_argument("--grid", default=None,
                   help="grid config; expands to one run per spec")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("monitor", help="replay a frame log through the "
                                       "risk engine")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calibration", default=None)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("calibrate", help="risk threshold from clean logs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--quantile", type=float, default=0.95)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="offline report over a run batch")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--calibration", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="runtime overhead and kernel timing")
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientCalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedRecordError as exc:
        print(f"malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
