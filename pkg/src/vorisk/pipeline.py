"""End-to-end runs: simulate, replay, calibrate, evaluate, bench.

A run directory holds framelog.jsonl, risk.csv, and meta.json. The risk
CSV written during simulation is bit-identical to one produced by
replaying the frame log through the monitor (the live/replay equivalence
the frame-log boundary exists for).
"""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels, corruption as corruption_mod, framelog
from .backend import SlidingWindowEstimator
from .config import RunPlan
from .errors import DivergedError, InsufficientCalibrationError
from .evaluation import FAIL_ERROR_M, EvalReport, RunLog, evaluate_runs
from .risk import (FrameInput, RiskConfig, RiskMonitor, RiskRecord,
                   calibrate_threshold, frame_input_from_solve)
from .scene import generate_scenario

FRAMELOG_NAME = "framelog.jsonl"
RISK_NAME = "risk.csv"
META_NAME = "meta.json"


@dataclass
class RunResult:
    tag: str
    records: list[RiskRecord]
    pose_errors: list[float]
    diverged: bool
    divergence_frame: int | None
    failed: bool
    failure_frame: int | None
    n_frames: int
    dt: float
    out_dir: str | None = None
    ba_seconds_per_frame: float = 0.0
    risk_seconds_per_frame: float = 0.0


def _frame_input_to_log_record(fi: FrameInput) -> framelog.FrameLogRecord:
    lm_ids = fi.landmark_ids
    feats = [
        framelog.FeatureEntry(
            feature_id=int(fi.feature_ids[i]),
            landmark_id=int(lm_ids[i]) if lm_ids is not None else -1,
            residual=fi.residuals[i],
            J=fi.J[i],
            sigma_world=fi.sigma_blocks[i],
            flags=int(fi.flags[i]) if fi.flags is not None else 0,
        )
        for i in range(fi.n_features)
    ]
    return framelog.FrameLogRecord(
        frame_id=fi.frame_id,
        timestamp=fi.timestamp,
        lambda_lm=fi.lambda_lm,
        iterations=fi.iterations,
        converged=fi.converged,
        features=feats,
        pose_error_m=fi.pose_error_m,
        degenerate=fi.degenerate,
    )


def _log_record_to_frame_input(rec: framelog.FrameLogRecord) -> FrameInput:
    n = rec.n_features
    return FrameInput(
        frame_id=rec.frame_id,
        timestamp=rec.timestamp,
        feature_ids=np.array([f.feature_id for f in rec.features],
                             dtype=np.int64),
        sigma_blocks=(np.stack([f.sigma_world for f in rec.features])
                      if n else np.zeros((0, 3, 3))),
        J=(np.stack([f.J for f in rec.features])
           if n else np.zeros((0, 2, 3))),
        residuals=(np.stack([f.residual for f in rec.features])
                   if n else np.zeros((0, 2))),
        lambda_lm=rec.lambda_lm,
        flags=np.array([f.flags for f in rec.features], dtype=np.int64),
        landmark_ids=np.array([f.landmark_id for f in rec.features],
                              dtype=np.int64),
        degenerate=rec.degenerate,
        pose_error_m=rec.pose_error_m,
        iterations=rec.iterations,
        converged=rec.converged,
    )


def simulate_run(plan: RunPlan, out_dir: str | None = None,
                 threshold: float | None = None,
                 timing: bool = False) -> RunResult:
    """Scene -> corruption -> backend -> risk, with optional logging."""
    truth, frames = generate_scenario(plan.scenario)
    if plan.corruption is not None:
        frames = corruption_mod.apply(plan.corruption, frames,
                                      plan.scenario)
    intr = plan.scenario.intrinsics
    estimator = SlidingWindowEstimator(intr, plan.backend,
                                       anchor_pose=truth.poses[0])
    monitor = RiskMonitor(plan.risk, intrinsics=intr, threshold=threshold)
    dt = 1.0 / plan.scenario.frame_rate_hz

    writer = None
    log_fp = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fp = open(os.path.join(out_dir, FRAMELOG_NAME), "w",
                      encoding="utf-8")
        writer = framelog.FrameLogWriter(log_fp, framelog.LogHeader(
            run_tag=plan.tag,
            intrinsics=intr,
            frame_rate_hz=plan.scenario.frame_rate_hz,
            corruption=(None if plan.corruption is None else {
                "kind": plan.corruption.kind,
                "severity": plan.corruption.severity,
                "seed": plan.corruption.seed,
                "window": plan.corruption.window,
                "level_override": plan.corruption.level_override,
            }),
        ))

    pose_errors: list[float] = []
    diverged = False
    divergence_frame = None
    ba_time = 0.0
    risk_time = 0.0

    try:
        for frame in frames:
            t0 = time.perf_counter() if timing else 0.0
            try:
                solve = estimator.process_frame(frame)
            except DivergedError:
                diverged = True
                divergence_frame = frame.frame_id
                break
            if timing:
                ba_time += time.perf_counter() - t0

            center_est = solve.pose_estimates[-1].center()
            center_gt = truth.poses[frame.frame_id].center()
            err = float(np.linalg.norm(center_est - center_gt))
            pose_errors.append(err)

            t1 = time.perf_counter() if timing else 0.0
            fi = frame_input_from_solve(solve, intr)
            monitor.process(fi)
            if timing:
                risk_time += time.perf_counter() - t1
            fi.pose_error_m = err

            if writer is not None:
                writer.write_frame(_frame_input_to_log_record(fi))
                if plan.log_hessian:
                    h = solve.hessian
                    writer.write_hessian(framelog.HessianRecord(
                        frame_id=solve.frame_id,
                        lambda_lm=h.lambda_lm,
                        pose_dim=h.pose_dim,
                        H_pp=h.H_pp, Bt=h.Bt, H_ll=h.H_ll,
                        landmark_ids=np.asarray(h.landmark_ids),
                    ))
            if estimator.diverged:
                diverged = True
                divergence_frame = frame.frame_id
                break
    finally:
        if log_fp is not None:
            log_fp.close()

    err_arr = np.array(pose_errors)
    over = np.flatnonzero(err_arr > plan.fail_error_m)
    failure_frame = None
    failed = diverged
    if len(over):
        failed = True
        failure_frame = int(over[0])
    elif diverged:
        failure_frame = divergence_frame

    n_frames = len(monitor.records)
    result = RunResult(
        tag=plan.tag,
        records=monitor.records,
        pose_errors=pose_errors,
        diverged=diverged,
        divergence_frame=divergence_frame,
        failed=failed,
        failure_frame=failure_frame,
        n_frames=n_frames,
        dt=dt,
        out_dir=out_dir,
        ba_seconds_per_frame=ba_time / max(n_frames, 1),
        risk_seconds_per_frame=risk_time / max(n_frames, 1),
    )
    if out_dir is not None:
        with open(os.path.join(out_dir, RISK_NAME), "w",
                  encoding="utf-8") as fp:
            framelog.write_risk_csv(fp, monitor.records, threshold)
        meta = {
            "tag": plan.tag,
            "diverged": diverged,
            "divergence_frame": divergence_frame,
            "failed": failed,
            "failure_frame": failure_frame,
            "n_frames": n_frames,
            "dt": dt,
            "max_pose_error_m": float(err_arr.max()) if len(err_arr)
            else 0.0,
            "corruption": None if plan.corruption is None else
            plan.corruption.tag(),
            "seed": plan.scenario.seed,
        }
        with open(os.path.join(out_dir, META_NAME), "w",
                  encoding="utf-8") as fp:
            json.dump(meta, fp, indent=1)
            fp.write("\n")
    return result


def replay_log(log_path: str, risk_config: RiskConfig,
               threshold: float | None = None) -> list[RiskRecord]:
    """Run the monitor over a frame log; the backend-agnostic entry."""
    with open(log_path, encoding="utf-8") as fp:
        header, records = framelog.read_framelog(fp)
        monitor = RiskMonitor(risk_config, intrinsics=header.intrinsics,
                              threshold=threshold)
        for kind, rec in records:
            if kind != "frame":
                continue
            monitor.process(_log_record_to_frame_input(rec))
    return monitor.records


def monitor_to_csv(log_path: str, out_path: str, risk_config: RiskConfig,
                   threshold: float | None = None) -> list[RiskRecord]:
    records = replay_log(log_path, risk_config, threshold)
    with open(out_path, "w", encoding="utf-8") as fp:
        framelog.write_risk_csv(fp, records, threshold)
    return records


def calibration_samples(records: list[RiskRecord],
                        risk_config: RiskConfig) -> list[float]:
    """Raw risk samples eligible for threshold calibration."""
    return [r.r_raw for i, r in enumerate(records)
            if i >= risk_config.warmup_samples and not r.saturated]


def calibrate_logs(log_paths: list[str], risk_config: RiskConfig,
                   quantile: float = 0.95) -> tuple[float, float, int]:
    """Thresholds from clean frame logs (nearest-rank percentiles).

    Returns (risk threshold, trend derivative threshold, sample count).
    The trend threshold is the same percentile of the clean smoothed-risk
    derivative, making the trend criterion dataset-specific.
    """
    samples: list[float] = []
    derivs: list[float] = []
    for path in log_paths:
        records = replay_log(path, risk_config, threshold=None)
        samples.extend(calibration_samples(records, risk_config))
        derivs.extend(r.r_dot for i, r in enumerate(records)
                      if i >= risk_config.warmup_samples and not r.saturated)
    if len(samples) < 20:
        raise InsufficientCalibrationError(
            f"only {len(samples)} usable calibration samples")
    return (calibrate_threshold(samples, quantile),
            calibrate_threshold(derivs, quantile), len(samples))


def runlog_from_dir(run_dir: str) -> RunLog:
    """Load one run directory into evaluation channels."""
    with open(os.path.join(run_dir, META_NAME), encoding="utf-8") as fp:
        meta = json.load(fp)
    with open(os.path.join(run_dir, RISK_NAME), encoding="utf-8") as fp:
        cols = framelog.read_risk_csv(fp)
    errors = []
    with open(os.path.join(run_dir, FRAMELOG_NAME), encoding="utf-8") as fp:
        _, records = framelog.read_framelog(fp)
        for kind, rec in records:
            if kind == "frame":
                errors.append(rec.pose_error_m
                              if rec.pose_error_m is not None else np.nan)
    channels = {
        "pose_error_m": np.array(errors, dtype=np.float64),
        "sigma_bar": cols["sigma_bar"],
        "residual_bar": cols["residual_bar"],
        "kappa_bar": cols["kappa_bar"],
        "r_raw": cols["r_raw"],
        "r_smooth": cols["r_smooth"],
        "margin": cols["margin"],
        "trend": cols["trend"],
        "saturated": cols["saturated"],
    }
    return RunLog(
        tag=meta["tag"],
        frame_channels=channels,
        failed=bool(meta["failed"]),
        failure_frame=meta.get("failure_frame"),
        dt=float(meta.get("dt", 0.05)),
    )


def evaluate_dir(runs_root: str, threshold: float,
                 policy_ks: tuple[int, ...] = (1, 3, 5, 10, 20),
                 label_threshold_m: float = 1.0, label_horizon: int = 50
                 ) -> EvalReport:
    run_dirs = sorted(
        d for d in (os.path.join(runs_root, name)
                    for name in os.listdir(runs_root))
        if os.path.isdir(d) and os.path.exists(os.path.join(d, META_NAME)))
    runs = [runlog_from_dir(d) for d in run_dirs]
    if not runs:
        raise FileNotFoundError(f"no run directories under {runs_root}")
    return evaluate_runs(runs, threshold, policy_ks, label_threshold_m,
                         label_horizon)


def write_report(report: EvalReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    lines = ["# vorisk-evalreport v1.0", ""]
    lines.append(f"runs_total = {report.run_counts.get('total', 0)}")
    lines.append(f"runs_failed = {report.run_counts.get('failed', 0)}")
    lines.append("")
    for name, auc in report.auc_per_indicator.items():
        lines.append(f"auc.{name} = {auc:.6f}")
    lines.append("")
    if report.lead_times_s:
        lt = np.array(report.lead_times_s)
        lines.append(f"lead_time.mean_s = {lt.mean():.6f}")
        lines.append(f"lead_time.median_s = {np.median(lt):.6f}")
    with open(os.path.join(out_dir, "report.txt"), "w",
              encoding="utf-8") as fp:
        fp.write("\n".join(lines) + "\n")

    with open(os.path.join(out_dir, "policy.csv"), "w",
              encoding="utf-8") as fp:
        fp.write("k,recall,fpr,precision,true_triggers,false_triggers,"
                 "failed_runs,total_runs\n")
        for k, m in sorted(report.policy_table.items()):
            def cell(x):
                return "" if x is None else f"{x:.6f}"
            fp.write(f"{k},{cell(m.recall)},{cell(m.fpr)},"
                     f"{cell(m.precision)},{m.true_triggers},"
                     f"{m.false_triggers},{m.failed_runs},{m.total_runs}\n")

    with open(os.path.join(out_dir, "hazard.csv"), "w",
              encoding="utf-8") as fp:
        fp.write("decile,mean_score,failure_probability,count\n")
        for i, b in enumerate(report.hazard):
            fp.write(f"{i},{b.mean_score!r},{b.failure_probability!r},"
                     f"{b.count}\n")

    with open(os.path.join(out_dir, "lead_times.csv"), "w",
              encoding="utf-8") as fp:
        fp.write("run,lead_time_s\n")
        for i, t in enumerate(report.lead_times_s):
            fp.write(f"{i},{t!r}\n")


def _grid_worker(args):
    plan, out_dir, threshold = args
    result = simulate_run(plan, out_dir, threshold)
    return result.tag, result.failed, result.diverged


def run_grid(base_plan: RunPlan, specs, out_root: str,
             threshold: float | None = None, jobs: int = 1) -> list[tuple]:
    """Simulate every corruption spec; returns (tag, failed, diverged)."""
    tasks = []
    for spec in specs:
        scenario = replace(base_plan.scenario, seed=spec.seed)
        plan = replace(base_plan, scenario=scenario, corruption=spec,
                       tag=spec.tag())
        tasks.append((plan, os.path.join(out_root, plan.tag), threshold))
    if jobs <= 1:
        return [_grid_worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_grid_worker, tasks))


def bench(plan: RunPlan, kernel_reps: int = 200) -> dict:
    """Per-frame cost with the monitor on vs off, plus kernel comparison."""
    base = simulate_run(replace(plan, corruption=None), out_dir=None,
                        timing=True)
    overhead = (base.risk_seconds_per_frame
                / max(base.ba_seconds_per_frame, 1e-12))
    out = {
        "frames": base.n_frames,
        "ba_us_per_frame": base.ba_seconds_per_frame * 1e6,
        "risk_us_per_frame": base.risk_seconds_per_frame * 1e6,
        "overhead_ratio": overhead,
        "kernels": {},
        "kernel_backend": _kernels.BACKEND,
    }
    n = plan.scenario.features_per_frame_target
    gen = np.random.Generator(np.random.Philox(key=123))
    A = gen.normal(size=(n, 3, 3))
    S = np.ascontiguousarray(
        np.einsum("nij,nkj->nik", A, A) + 3.0 * np.eye(3))
    J = np.ascontiguousarray(gen.normal(size=(n, 2, 3)))
    for name, impl in _kernels.implementations().items():
        t0 = time.perf_counter()
        for _ in range(kernel_reps):
            inv, _ = impl.sym_inv3(S)
            impl.pixel_covariance(J, inv)
            impl.singular_values_2x3(J)
        dt = (time.perf_counter() - t0) / kernel_reps
        out["kernels"][name] = dt * 1e6
    return out


def write_bench_report(results: dict, fp) -> None:
    fp.write("# vorisk-bench v1.0\n")
    fp.write(f"frames = {results['frames']}\n")
    fp.write(f"ba_us_per_frame = {results['ba_us_per_frame']:.3f}\n")
    fp.write(f"risk_us_per_frame = {results['risk_us_per_frame']:.3f}\n")
    fp.write(f"overhead_ratio = {results['overhead_ratio']:.6f}\n")
    fp.write(f"kernel_backend = {results['kernel_backend']}\n")
    for name, us in results["kernels"].items():
        fp.write(f"kernel_us.{name} = {us:.3f}\n")
