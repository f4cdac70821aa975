"""Online risk fusion: frame aggregation, normalization, smoothing, trend.

Per frame the monitor turns marginal information blocks and pixel
residuals into three proxies (mean pixel std, mean residual norm, mean
log condition number), z-normalizes each over a sliding window, clamps,
fuses into one scalar, smooths, differentiates, and raises margin/trend
warnings. Degenerate frames (no features, vanished support, singular
information) saturate to the analytic risk ceiling instead of failing.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dtrmm
from scipy.linalg.lapack import dtrtri

from . import _kernels
from .backend import SolveOutput
from .errors import InsufficientCalibrationError, PoseBlockSingularError
from .geometry import Intrinsics
from .uncertainty import (COND_LIMIT_COV, KAPPA_CAP, _KAPPA_EPS,
                          FeatureUncertainty, covariances_from_marginals,
                          feature_pass, schur_complement)

FLAG_OUTLIER_INJECTED = 0x1
FLAG_SOURCE_SATURATED = 0x2


@dataclass
class RiskConfig:
    lambda_weight: float = 1.0     # weight of the uncertainty term
    clamp: float = 3.0
    norm_window: int = 75
    warmup_samples: int = 10
    smooth_window: int = 7
    trend_frames: int = 4
    trend_threshold: float = 0.0
    min_features: int = 20         # below this a frame is degenerate
    outlier_gate_px: float = 4.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.trend_frames < 1:
            raise ValueError("trend_frames must be >= 1")

    def risk_bounds(self) -> tuple[float, float]:
        """Stated analytic bounds of the fused score."""
        hi = (2.0 + self.lambda_weight) * self.clamp + \
            math.log1p(self.clamp)
        return -hi, hi


@dataclass
class FrameIndicators:
    frame_id: int
    sigma_bar: float
    residual_bar: float
    kappa_bar: float
    feature_count: int
    outlier_ratio: float
    saturated: bool


@dataclass
class NormalizerState:
    """Sliding-window z-score state for one channel.

    Welford-style running mean and second moment with window removal:
    O(1) per update and stable under large common offsets (the z-score
    stays translation invariant to floating-point accuracy).
    """

    window_len: int = 75
    window: deque = field(default_factory=deque)
    _mean: float = 0.0
    _m2: float = 0.0

    def stats(self) -> tuple[float, float, int]:
        n = len(self.window)
        if n == 0:
            return 0.0, 0.0, 0
        return self._mean, math.sqrt(max(self._m2 / n, 0.0)), n

    def push(self, x: float) -> None:
        x = float(x)
        self.window.append(x)
        n = len(self.window)
        d = x - self._mean
        self._mean += d / n
        self._m2 += d * (x - self._mean)
        while len(self.window) > self.window_len:
            y = self.window.popleft()
            n = len(self.window)
            old_mean = self._mean
            self._mean = (old_mean * (n + 1) - y) / n
            self._m2 -= (y - old_mean) * (y - self._mean)
            self._m2 = max(self._m2, 0.0)


def zscore_update(state: NormalizerState, x: float) -> float:
    """z-score of x against the current window, then advance the window.

    Population std; returns 0 when the window std is below 1e-9 (constant
    or empty history).
    """
    mu, sd, n = state.stats()
    z = 0.0 if (n == 0 or sd < 1e-9) else (x - mu) / sd
    state.push(x)
    return z


def clamp3(x: float, bound: float = 3.0) -> float:
    """Clamp into [-bound, bound]."""
    return min(max(x, -bound), bound)


def signed_log1p(x: float) -> float:
    """Odd dynamic-range compression sgn(x) * ln(1 + |x|); total on R."""
    return math.copysign(math.log1p(abs(x)), x)


def fuse_risk(sigma_z: float, residual_z: float, kappa_z: float,
              lambda_weight: float = 1.0, clamp: float = 3.0) -> float:
    """Scalar risk: clamp(r) + lambda * clamp(sigma) + slog(clamp(kappa)).

    The conditioning term is compressed with a sign-preserving log so the
    fusion stays defined for negative normalized conditioning.
    """
    if lambda_weight < 0:
        raise ValueError("lambda_weight must be >= 0")
    return (clamp3(residual_z, clamp)
            + lambda_weight * clamp3(sigma_z, clamp)
            + signed_log1p(clamp3(kappa_z, clamp)))


def smooth_and_differentiate(raw_window: deque, prev_smooth: float | None,
                             dt: float) -> tuple[float, float]:
    """Moving average of the raw window and its finite difference."""
    smooth = float(np.mean(raw_window))
    if prev_smooth is None or dt <= 0.0:
        return smooth, 0.0
    return smooth, (smooth - prev_smooth) / dt


def smooth_series(raw, window: int) -> list[float]:
    """Offline replay of the monitor's running-sum moving average.

    Reproduces the online smoothed series bit-exactly from the logged raw
    values (the arithmetic order matches the monitor's).
    """
    out = []
    buf: deque = deque()
    total = 0.0
    for x in raw:
        x = float(x)
        buf.append(x)
        total += x
        if len(buf) > window:
            total -= buf.popleft()
        out.append(total / len(buf))
    return out


def trend_detector(derivatives: deque, min_consecutive: int = 4,
                   threshold: float = 0.0) -> bool:
    """True iff the last min_consecutive derivatives all exceed threshold."""
    if min_consecutive < 1:
        raise ValueError("min_consecutive must be >= 1")
    if len(derivatives) < min_consecutive:
        return False
    recent = list(derivatives)[-min_consecutive:]
    return all(d > threshold for d in recent)


def calibrate_threshold(samples, quantile: float = 0.95) -> float:
    """Nearest-rank percentile of clean risk samples (>= 20 required)."""
    arr = np.sort(np.asarray(list(samples), dtype=np.float64))
    if len(arr) < 20:
        raise InsufficientCalibrationError(
            f"need >= 20 calibration samples, got {len(arr)}")
    rank = math.ceil(quantile * len(arr))
    return float(arr[max(rank, 1) - 1])


def risk_to_iso(r_t: float, severity: float) -> float:
    """Application risk: monitor score times the severity multiplier."""
    if severity < 0:
        raise ValueError("severity must be >= 0")
    return r_t * severity


def aggregate_frame(features: list[FeatureUncertainty],
                    outlier_gate_px: float = 4.0,
                    frame_id: int = -1) -> FrameIndicators:
    """Frame proxies: means of pixel std, residual norm, and log kappa.

    An empty list yields NaN aggregates flagged saturated (a maximal-risk
    frame), never an exception.
    """
    n = len(features)
    if n == 0:
        return FrameIndicators(frame_id, math.nan, math.nan, math.nan, 0,
                               math.nan, True)
    sigma_bar = float(np.mean([f.sigma_px for f in features]))
    residual_bar = float(np.mean([f.residual_norm for f in features]))
    kappa_bar = float(np.mean([f.log_kappa for f in features]))
    outlier_ratio = float(np.mean(
        [f.residual_norm > outlier_gate_px for f in features]))
    saturated = any(f.saturated for f in features)
    return FrameIndicators(frame_id, sigma_bar, residual_bar, kappa_bar,
                           n, outlier_ratio, saturated)


@dataclass
class FrameInput:
    """Backend-agnostic per-frame payload consumed by the monitor."""

    frame_id: int
    timestamp: float
    feature_ids: np.ndarray    # (n,)
    sigma_blocks: np.ndarray   # (n, 3, 3) marginal world covariances
    J: np.ndarray              # (n, 2, 3)
    residuals: np.ndarray      # (n, 2)
    lambda_lm: float = 0.0
    flags: np.ndarray | None = None
    landmark_ids: np.ndarray | None = None
    degenerate: bool = False   # upstream marked the frame unusable
    pose_error_m: float | None = None
    iterations: int = 0
    converged: bool = True

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)


def frame_input_from_solve(solve: SolveOutput,
                           intr: Intrinsics | None = None) -> FrameInput:
    """Extract newest-frame world covariances from the solve.

    Reuses the solver's reduced-system factorization when present (the
    hot path: covariance of the damped system is M_i + W_i A'^-1 W_i^T),
    falling back to a standalone marginalization otherwise. Covariances
    are rescaled by the residual-consistent noise factor. A singular pose
    system marks the frame degenerate rather than raising.
    """
    k = solve.newest_count
    if k:
        ids = solve.feature_ids[-k:]
        J = solve.jacobians[-k:]
        res = solve.residuals[-k:]
        lm = solve.landmark_ids[-k:]
    else:
        ids = solve.feature_ids[:0]
        J = solve.jacobians[:0]
        res = solve.residuals[:0]
        lm = solve.landmark_ids[:0]
    flags = np.zeros(len(ids), dtype=np.int64)
    degenerate = False
    n = len(ids)
    sigma_blocks = np.zeros((n, 3, 3))
    cov_scale = 1.0 / solve.noise_scale
    cache = solve.solver_cache
    if n and cache is not None:
        hess = solve.hessian
        slots = np.searchsorted(hess.landmark_ids, lm)
        if cache.chol is None or hess.pose_dim == 0:
            sigma_blocks = cov_scale * cache.M[slots]
        else:
            P = hess.pose_dim
            L = hess.num_landmarks
            W = cache.W
            # covariance sandwich via the Cholesky factor: with Z = W L^-T
            # the marginal is M_i + Z_i Z_i^T (triangular ops only)
            tri_inv, info = dtrtri(cache.chol[0], lower=True)
            if info != 0:
                raise PoseBlockSingularError("dtrtri failed")
            Zt = dtrmm(1.0, tri_inv, W.reshape(3 * L, P).T, lower=True)
            Z = Zt.T.reshape(L, 3, P)
            sigma_all = _kernels.sym_gram_scaled(Z, cache.M, cov_scale)
            sigma_blocks = sigma_all[slots]
    elif n:
        try:
            system = schur_complement(solve.hessian)
            slots = np.searchsorted(system.landmark_ids, lm)
            cov, _ = covariances_from_marginals(system.S[slots])
            sigma_blocks = cov_scale * cov
        except PoseBlockSingularError:
            degenerate = True
    return FrameInput(
        frame_id=solve.frame_id,
        timestamp=solve.timestamp,
        feature_ids=ids,
        sigma_blocks=sigma_blocks,
        J=J,
        residuals=res,
        lambda_lm=solve.hessian.lambda_lm,
        flags=flags,
        landmark_ids=lm,
        degenerate=degenerate,
        iterations=solve.iterations,
        converged=solve.converged,
    )


@dataclass
class RiskRecord:
    """One row of the risk trace."""

    frame_id: int
    t: float
    dt: float
    sigma_bar: float
    residual_bar: float
    kappa_bar: float
    n_features: int
    outlier_ratio: float
    sigma_term: float
    residual_term: float
    kappa_term: float
    r_raw: float
    r_smooth: float
    r_dot: float
    margin: float
    trend: bool
    saturated: bool


class RiskMonitor:
    """Sequential per-frame risk state for one run.

    The detection threshold is single-assignment: it may be set once
    (from calibration) and never changed afterwards.
    """

    def __init__(self, config: RiskConfig | None = None,
                 intrinsics: Intrinsics | None = None,
                 threshold: float | None = None):
        self.config = config or RiskConfig()
        self.intrinsics = intrinsics
        self._threshold = threshold
        c = self.config
        self.norm_sigma = NormalizerState(c.norm_window)
        self.norm_residual = NormalizerState(c.norm_window)
        self.norm_kappa = NormalizerState(c.norm_window)
        self.raw_window: deque = deque()
        self._raw_sum = 0.0
        self.deriv_window: deque = deque(maxlen=max(c.trend_frames, 1))
        self.prev_smooth: float | None = None
        self.prev_timestamp: float | None = None
        self.records: list[RiskRecord] = []

    @property
    def threshold(self) -> float | None:
        return self._threshold

    @threshold.setter
    def threshold(self, value: float) -> None:
        if self._threshold is not None:
            raise RuntimeError("risk threshold is single-assignment")
        self._threshold = float(value)

    def process(self, frame: FrameInput) -> RiskRecord:
        """Advance the monitor by one frame; never raises on degeneracy."""
        c = self.config
        n = frame.n_features
        if frame.degenerate or n == 0:
            indicators = FrameIndicators(frame.frame_id, math.nan, math.nan,
                                         math.nan, n, math.nan, True)
        else:
            sigma_bar, residual_bar, kappa_bar, outlier_ratio, n_sat = \
                _kernels.frame_stats(
                    np.ascontiguousarray(frame.sigma_blocks),
                    np.ascontiguousarray(frame.J),
                    np.ascontiguousarray(frame.residuals),
                    COND_LIMIT_COV, KAPPA_CAP, _KAPPA_EPS,
                    c.outlier_gate_px)
            indicators = FrameIndicators(
                frame.frame_id, sigma_bar, residual_bar, kappa_bar, n,
                outlier_ratio, n_sat > 0)
        saturated = indicators.saturated or n < c.min_features

        _, hi = c.risk_bounds()
        if saturated:
            sigma_term = residual_term = kappa_term = math.nan
            r_raw = hi
        else:
            warm = len(self.norm_sigma.window) >= c.warmup_samples
            sig_z = zscore_update(self.norm_sigma, indicators.sigma_bar)
            res_z = zscore_update(self.norm_residual,
                                  indicators.residual_bar)
            kap_z = zscore_update(self.norm_kappa, indicators.kappa_bar)
            if not warm:
                sig_z = res_z = kap_z = 0.0
            sigma_term = c.lambda_weight * clamp3(sig_z, c.clamp)
            residual_term = clamp3(res_z, c.clamp)
            kappa_term = signed_log1p(clamp3(kap_z, c.clamp))
            r_raw = residual_term + sigma_term + kappa_term

        if self.prev_timestamp is None:
            dt = 0.0
        else:
            dt = frame.timestamp - self.prev_timestamp
        self.prev_timestamp = frame.timestamp

        self.raw_window.append(r_raw)
        self._raw_sum += r_raw
        if len(self.raw_window) > c.smooth_window:
            self._raw_sum -= self.raw_window.popleft()
        r_smooth = self._raw_sum / len(self.raw_window)
        r_dot = 0.0 if (self.prev_smooth is None or dt <= 0.0) else \
            (r_smooth - self.prev_smooth) / dt
        self.prev_smooth = r_smooth
        self.deriv_window.append(r_dot)
        trend = trend_detector(self.deriv_window, c.trend_frames,
                               c.trend_threshold)

        if saturated:
            margin = math.inf
        elif self._threshold is not None:
            margin = r_smooth - self._threshold
        else:
            margin = math.nan

        record = RiskRecord(
            frame_id=frame.frame_id,
            t=frame.timestamp,
            dt=dt,
            sigma_bar=indicators.sigma_bar,
            residual_bar=indicators.residual_bar,
            kappa_bar=indicators.kappa_bar,
            n_features=n,
            outlier_ratio=indicators.outlier_ratio,
            sigma_term=sigma_term,
            residual_term=residual_term,
            kappa_term=kappa_term,
            r_raw=r_raw,
            r_smooth=r_smooth,
            r_dot=r_dot,
            margin=margin,
            trend=trend,
            saturated=saturated,
        )
        self.records.append(record)
        return record

    def process_solve(self, solve: SolveOutput) -> RiskRecord:
        """Algorithm-1 end to end: marginalize, per-feature pass, fuse."""
        return self.process(frame_input_from_solve(solve, self.intrinsics))
