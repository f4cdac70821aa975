"""Offline analysis of logged runs: labels, AUC, hazard, lead time, policy.

Pure batch functions over arrays; the CLI layer handles file IO. Frames
whose channel value is undefined because the frame saturated score +inf
for ranking purposes (a saturated frame is maximal evidence on every
channel).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SingleClassError

ABLATION_CHANNELS = {
    "sigma_only": "sigma_bar",
    "residual_only": "residual_bar",
    "conditioning_only": "kappa_bar",
    "fused": "r_smooth",
}

FAIL_ERROR_M = 5.0  # desk-scale stand-in for a hard SLAM timeout


def label_degradation(errors: np.ndarray, threshold_m: float = 1.0,
                      horizon: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame degradation labels.

    label[t] = 1 iff max(errors[t+1 .. t+horizon]) > threshold_m. Frames
    whose lookahead is cut short by the sequence end are labeled on the
    truncated horizon and flagged.
    """
    e = np.asarray(errors, dtype=np.float64)
    n = len(e)
    labels = np.zeros(n, dtype=np.int64)
    truncated = np.zeros(n, dtype=bool)
    for t in range(n):
        stop = t + 1 + horizon
        ahead = e[t + 1:stop]
        if stop > n:
            truncated[t] = True
        if len(ahead) and np.nanmax(ahead) > threshold_m:
            labels[t] = 1
    return labels, truncated


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with half credit for ties.

    Raises SingleClassError unless both classes are present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("need both positive and negative labels")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == \
                sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_pos = float(ranks[pos].sum())
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class HazardBin:
    mean_score: float
    failure_probability: float
    count: int


def hazard_deciles(scores: np.ndarray, labels: np.ndarray,
                   bins: int = 10) -> list[HazardBin]:
    """Equal-count score bins (ties broken by frame order) with per-bin
    positive rate; bin 0 holds the lowest scores."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(scores)
    if n < bins:
        raise ValueError(f"need >= {bins} samples, got {n}")
    order = np.argsort(scores, kind="stable")
    out = []
    for b in range(bins):
        sel = order[b * n // bins:(b + 1) * n // bins]
        out.append(HazardBin(
            mean_score=float(scores[sel].mean()),
            failure_probability=float(np.mean(labels[sel] == 1)),
            count=len(sel),
        ))
    return out


def first_warning_frame(margins: np.ndarray, trends: np.ndarray
                        ) -> int | None:
    """Index of the first frame with positive margin or active trend."""
    with np.errstate(invalid="ignore"):
        warning = (np.asarray(margins) > 0.0) | \
            np.asarray(trends).astype(bool)
    hits = np.flatnonzero(warning)
    return int(hits[0]) if len(hits) else None


def lead_time(margins: np.ndarray, trends: np.ndarray, failure_frame: int,
              dt: float) -> float:
    """Seconds between the first warning and the failure frame; 0 when no
    warning precedes the failure."""
    first = first_warning_frame(margins, trends)
    if first is None or first > failure_frame:
        return 0.0
    return (failure_frame - first) * dt


def stop_policy(r_smooth: np.ndarray, threshold: float,
                persistence: int) -> int | None:
    """First frame completing `persistence` consecutive frames above the
    threshold; None if the run never qualifies."""
    if persistence < 1:
        raise ValueError("persistence must be >= 1")
    run = 0
    for i, r in enumerate(np.asarray(r_smooth, dtype=np.float64)):
        run = run + 1 if r > threshold else 0
        if run >= persistence:
            return i
    return None


@dataclass
class PolicyMetrics:
    recall: float | None
    fpr: float | None
    precision: float | None
    true_triggers: int
    false_triggers: int
    failed_runs: int
    total_runs: int


def policy_metrics(outcomes: list[tuple[bool, bool]]) -> PolicyMetrics:
    """Confusion rates from (triggered, failed) run outcomes."""
    tt = sum(1 for trig, fail in outcomes if trig and fail)
    ft = sum(1 for trig, fail in outcomes if trig and not fail)
    n_fail = sum(1 for _, fail in outcomes if fail)
    n_ok = len(outcomes) - n_fail
    recall = tt / n_fail if n_fail else None
    fpr = ft / n_ok if n_ok else None
    precision = (tt / (tt + ft)) if (tt + ft) else None
    return PolicyMetrics(recall, fpr, precision, tt, ft, n_fail,
                         len(outcomes))


@dataclass
class RunLog:
    """Channels of one run needed for evaluation."""

    tag: str
    frame_channels: dict[str, np.ndarray]  # includes labels per frame
    failed: bool
    failure_frame: int | None
    dt: float


def _channel_scores(run: RunLog, channel: str) -> np.ndarray:
    """Channel values with saturated-frame NaNs promoted to +inf."""
    x = np.asarray(run.frame_channels[channel], dtype=np.float64).copy()
    sat = np.asarray(run.frame_channels.get(
        "saturated", np.zeros(len(x)))).astype(bool)
    x[sat & ~np.isfinite(x)] = np.inf
    nan = np.isnan(x)
    if np.any(nan):
        x[nan] = np.inf
    return x


def ablation(runs: list[RunLog], indicator: str) -> float:
    """Frame-level AUC of one indicator channel pooled over runs."""
    if indicator not in ABLATION_CHANNELS:
        raise ValueError(f"unknown indicator {indicator!r}")
    channel = ABLATION_CHANNELS[indicator]
    scores = np.concatenate([_channel_scores(r, channel) for r in runs])
    labels = np.concatenate([r.frame_channels["label"] for r in runs])
    return roc_auc(scores, labels)


@dataclass
class EvalReport:
    auc_per_indicator: dict[str, float] = field(default_factory=dict)
    hazard: list[HazardBin] = field(default_factory=list)
    lead_times_s: list[float] = field(default_factory=list)
    policy_table: dict[int, PolicyMetrics] = field(default_factory=dict)
    run_counts: dict[str, int] = field(default_factory=dict)


def evaluate_runs(runs: list[RunLog], threshold: float,
                  policy_ks: tuple[int, ...] = (1, 3, 5, 10, 20),
                  label_threshold_m: float = 1.0,
                  label_horizon: int = 50) -> EvalReport:
    """Full offline report over a batch of runs.

    Each run must carry pose_error_m, r_smooth, margin, trend, saturated
    and the per-frame ablation channels; labels are derived here.
    """
    report = EvalReport()
    for run in runs:
        err = np.asarray(run.frame_channels["pose_error_m"],
                         dtype=np.float64)
        labels, truncated = label_degradation(err, label_threshold_m,
                                              label_horizon)
        if run.failed and run.failure_frame is not None:
            # the failure event itself is a degradation within the horizon
            # of every frame that precedes it by at most label_horizon
            t = np.arange(len(err))
            f = run.failure_frame
            labels = labels | ((t < f) & (f <= t + label_horizon))
        run.frame_channels["label"] = labels
        run.frame_channels["label_truncated"] = truncated

    pooled_labels = np.concatenate(
        [r.frame_channels["label"] for r in runs])
    both_classes = 0 < pooled_labels.sum() < len(pooled_labels)
    if both_classes:
        for name in ABLATION_CHANNELS:
            report.auc_per_indicator[name] = ablation(runs, name)
        fused = np.concatenate([_channel_scores(r, "r_smooth")
                                for r in runs])
        report.hazard = hazard_deciles(fused, pooled_labels)

    for run in runs:
        if run.failed and run.failure_frame is not None:
            report.lead_times_s.append(lead_time(
                run.frame_channels["margin"], run.frame_channels["trend"],
                run.failure_frame, run.dt))

    for k in policy_ks:
        outcomes = []
        for run in runs:
            trig = stop_policy(run.frame_channels["r_smooth"], threshold, k)
            outcomes.append((trig is not None, run.failed))
        report.policy_table[k] = policy_metrics(outcomes)

    report.run_counts = {
        "total": len(runs),
        "failed": sum(1 for r in runs if r.failed),
    }
    return report
