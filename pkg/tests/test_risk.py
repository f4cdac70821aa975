"""Risk engine: aggregation, normalization, fusion, smoothing, warnings."""
import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vorisk.errors import InsufficientCalibrationError
from vorisk.risk import (FrameInput, FrameIndicators, NormalizerState,
                         RiskConfig, RiskMonitor, aggregate_frame,
                         calibrate_threshold, clamp3, fuse_risk,
                         risk_to_iso, signed_log1p, smooth_and_differentiate,
                         smooth_series, trend_detector, zscore_update)
from vorisk.uncertainty import FeatureUncertainty


def feat(sigma_px=1.0, residual=0.5, kappa=2.0, sat=False):
    return FeatureUncertainty(
        feature_id=0, sigma_world=np.eye(3), sigma_pixel=np.eye(2),
        sigma_px=sigma_px, residual_norm=residual, kappa=kappa,
        log_kappa=math.log(kappa), depth_sensitivity=0.1, saturated=sat)


class TestAggregate:
    def test_hand_arithmetic(self):
        # tr(sigma_pixel) of 4 and 9 px^2 -> sigma_bar = (2 + 3)/2 = 2.5
        feats = [feat(sigma_px=2.0), feat(sigma_px=3.0)]
        ind = aggregate_frame(feats)
        assert np.isclose(ind.sigma_bar, 2.5)

    def test_identical_features(self):
        feats = [feat(sigma_px=1.3, residual=0.7, kappa=3.0)] * 5
        ind = aggregate_frame(feats)
        assert np.isclose(ind.sigma_bar, 1.3)
        assert np.isclose(ind.residual_bar, 0.7)
        assert np.isclose(ind.kappa_bar, math.log(3.0))
        assert ind.feature_count == 5

    def test_mean_of_logs(self):
        # kappa values {e, e^3} -> mean log = 2
        feats = [feat(kappa=math.e), feat(kappa=math.e ** 3)]
        ind = aggregate_frame(feats)
        assert np.isclose(ind.kappa_bar, 2.0)

    def test_empty_is_saturated(self):
        ind = aggregate_frame([])
        assert ind.saturated
        assert ind.feature_count == 0
        assert math.isnan(ind.sigma_bar)

    def test_outlier_ratio(self):
        feats = [feat(residual=1.0), feat(residual=10.0)]
        ind = aggregate_frame(feats, outlier_gate_px=4.0)
        assert np.isclose(ind.outlier_ratio, 0.5)


class TestZscore:
    def test_constant_history_returns_zero(self):
        state = NormalizerState(window_len=10)
        for _ in range(5):
            state.push(5.0)
        assert zscore_update(state, 5.0) == 0.0

    def test_population_std_example(self):
        # window [1, 2, 3], x = 3 -> (3 - 2)/sqrt(2/3)
        state = NormalizerState(window_len=10)
        for v in (1.0, 2.0, 3.0):
            state.push(v)
        z = zscore_update(state, 3.0)
        assert np.isclose(z, 1.0 / math.sqrt(2.0 / 3.0))
        assert np.isclose(z, 1.2247, atol=1e-4)

    def test_state_advances(self):
        state = NormalizerState(window_len=3)
        for v in (1.0, 2.0, 3.0, 4.0):
            zscore_update(state, v)
        assert list(state.window) == [2.0, 3.0, 4.0]

    @given(st.floats(-1e6, 1e6))
    @settings(max_examples=50, deadline=None)
    def test_translation_invariance(self, c):
        window = [1.0, 4.0, 2.0, 8.0, 3.0]
        s1 = NormalizerState(window_len=10)
        s2 = NormalizerState(window_len=10)
        for v in window:
            s1.push(v)
            s2.push(v + c)
        z1 = zscore_update(s1, 5.0)
        z2 = zscore_update(s2, 5.0 + c)
        assert np.isclose(z1, z2, atol=1e-6)

    def test_empty_window_returns_zero(self):
        state = NormalizerState(window_len=5)
        assert zscore_update(state, 42.0) == 0.0


class TestClampAndFuse:
    def test_clamp_examples(self):
        assert clamp3(4.2) == 3.0
        assert clamp3(-7.0) == -3.0
        assert clamp3(1.5) == 1.5

    @given(st.floats(allow_nan=False, allow_infinity=False))
    @settings(max_examples=100, deadline=None)
    def test_clamp_bounds(self, x):
        assert -3.0 <= clamp3(x) <= 3.0

    def test_neutral_point(self):
        assert fuse_risk(0.0, 0.0, 0.0) == 0.0

    def test_formula_evaluation(self):
        # all inputs 1 with lambda 1: 1 + 1 + ln 2
        r = fuse_risk(1.0, 1.0, 1.0, 1.0)
        assert np.isclose(r, 2.0 + math.log(2.0))
        assert np.isclose(r, 2.6931, atol=1e-4)

    def test_negative_conditioning_finite(self):
        # kappa_z = -2: conditioning term is -ln 3, no domain error
        r = fuse_risk(0.0, 0.0, -2.0)
        assert np.isclose(r, -math.log(3.0))

    def test_signed_log_is_odd(self):
        for x in (0.1, 1.0, 2.5):
            assert np.isclose(signed_log1p(-x), -signed_log1p(x))

    @given(st.floats(-100, 100), st.floats(-100, 100),
           st.floats(-100, 100))
    @settings(max_examples=200, deadline=None)
    def test_fused_risk_bounded(self, a, b, c):
        lam = 1.0
        r = fuse_risk(a, b, c, lam)
        lo, hi = RiskConfig(lambda_weight=lam).risk_bounds()
        assert lo <= r <= hi

    def test_rejects_negative_lambda(self):
        with pytest.raises(ValueError):
            fuse_risk(0.0, 0.0, 0.0, -1.0)


class TestSmoothing:
    def test_constant_series(self):
        window = deque([2.0] * 7)
        smooth, dot = smooth_and_differentiate(window, 2.0, 0.05)
        assert smooth == 2.0
        assert dot == 0.0

    def test_linear_ramp_derivative(self):
        # raw ramp +0.1/frame, dt = 0.05 s: smoothed derivative 2.0 /s
        raw = [0.1 * k for k in range(30)]
        smooth = smooth_series(raw, 7)
        dots = [(b - a) / 0.05 for a, b in zip(smooth, smooth[1:])]
        assert np.allclose(dots[10:], 2.0, atol=1e-9)

    def test_spike_attenuation(self):
        # a single spike of height h moves the M=7 average by <= h/7
        h = 14.0
        raw = [0.0] * 10 + [h] + [0.0] * 10
        smooth = smooth_series(raw, 7)
        assert max(smooth) <= h / 7 + 1e-12

    def test_smooth_series_matches_monitor_arithmetic(self):
        raw = list(np.random.default_rng(0).normal(size=50))
        out = smooth_series(raw, 7)
        # replay the same running-sum updates manually
        buf, total, expect = deque(), 0.0, []
        for x in raw:
            buf.append(x)
            total += x
            if len(buf) > 7:
                total -= buf.popleft()
            expect.append(total / len(buf))
        assert out == expect

    def test_first_frame_derivative_zero(self):
        smooth, dot = smooth_and_differentiate(deque([1.5]), None, 0.05)
        assert dot == 0.0


class TestTrend:
    def test_four_positives_activate(self):
        assert trend_detector(deque([0.1, 0.2, 0.3, 0.4]), 4, 0.0)

    def test_broken_run_inactive(self):
        assert not trend_detector(deque([0.1, 0.2, -0.1, 0.3]), 4, 0.0)

    def test_alternating_never_active(self):
        seq = deque([0.5, -0.5] * 10)
        for c in range(2, 6):
            assert not trend_detector(seq, c, 0.0)

    def test_needs_enough_history(self):
        assert not trend_detector(deque([1.0, 1.0]), 4, 0.0)


class TestCalibration:
    def test_nearest_rank_95(self):
        assert calibrate_threshold(range(1, 101)) == 95.0

    def test_constant_samples(self):
        assert calibrate_threshold([7.0] * 30) == 7.0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientCalibrationError):
            calibrate_threshold([1.0] * 19)

    def test_rank_step_stability(self):
        # adding samples below the current 95th percentile moves the
        # threshold by at most one rank step (order-statistics oracle)
        rng = np.random.default_rng(1)
        for _ in range(20):
            base = sorted(rng.normal(size=100))
            th = calibrate_threshold(base)
            extra = base + [th - rng.uniform(0.1, 2.0)]
            th2 = calibrate_threshold(extra)
            s = np.sort(extra)
            idx = int(np.searchsorted(s, th))
            neighborhood = s[max(idx - 1, 0):idx + 2]
            assert th2 <= th
            assert th2 >= neighborhood[0]

    def test_threshold_single_assignment(self):
        mon = RiskMonitor(RiskConfig())
        mon.threshold = 1.5
        with pytest.raises(RuntimeError):
            mon.threshold = 2.0


class TestRiskToIso:
    def test_zero_severity(self):
        assert risk_to_iso(2.0, 0.0) == 0.0

    def test_identity_multiplier(self):
        assert risk_to_iso(1.7, 1.0) == 1.7

    def test_multiplication(self):
        assert risk_to_iso(2.5, 3.0) == 7.5

    def test_rejects_negative_severity(self):
        with pytest.raises(ValueError):
            risk_to_iso(1.0, -0.5)


def make_frame_input(frame_id, t, n, rng, scale=1.0):
    A = rng.normal(size=(n, 3, 3))
    sigma = scale * (A @ A.transpose(0, 2, 1) + np.eye(3)) * 1e-4
    J = rng.normal(size=(n, 2, 3)) * 50.0
    res = rng.normal(scale=0.5, size=(n, 2))
    return FrameInput(frame_id=frame_id, timestamp=t,
                      feature_ids=np.arange(n), sigma_blocks=sigma,
                      J=J, residuals=res)


class TestMonitor:
    def test_zero_feature_frame_saturates(self):
        mon = RiskMonitor(RiskConfig(), threshold=1.0)
        rec = mon.process(FrameInput(
            frame_id=0, timestamp=0.0, feature_ids=np.zeros(0, dtype=int),
            sigma_blocks=np.zeros((0, 3, 3)), J=np.zeros((0, 2, 3)),
            residuals=np.zeros((0, 2))))
        assert rec.saturated
        assert rec.margin == math.inf
        _, hi = RiskConfig().risk_bounds()
        assert rec.r_raw == hi

    def test_sparse_frame_saturates(self):
        cfg = RiskConfig(min_features=20)
        mon = RiskMonitor(cfg)
        rng = np.random.default_rng(2)
        rec = mon.process(make_frame_input(0, 0.0, 5, rng))
        assert rec.saturated

    def test_warmup_fuses_to_zero(self):
        cfg = RiskConfig(warmup_samples=10)
        mon = RiskMonitor(cfg)
        rng = np.random.default_rng(3)
        for k in range(9):
            rec = mon.process(make_frame_input(k, k * 0.05, 50, rng))
            assert rec.r_raw == 0.0

    def test_smoothing_identity_from_logged_raw(self):
        cfg = RiskConfig()
        mon = RiskMonitor(cfg)
        rng = np.random.default_rng(4)
        for k in range(60):
            mon.process(make_frame_input(k, k * 0.05, 50, rng,
                                         scale=1.0 + 0.2 * (k % 5)))
        raw = [r.r_raw for r in mon.records]
        smooth = smooth_series(raw, cfg.smooth_window)
        logged = [r.r_smooth for r in mon.records]
        assert smooth == logged  # bit-exact

    def test_derivative_consistent_with_dt(self):
        mon = RiskMonitor(RiskConfig())
        rng = np.random.default_rng(5)
        for k in range(30):
            mon.process(make_frame_input(k, k * 0.05, 50, rng))
        for prev, cur in zip(mon.records, mon.records[1:]):
            expect = (cur.r_smooth - prev.r_smooth) / cur.dt
            assert np.isclose(cur.r_dot, expect, rtol=1e-12, atol=1e-12)

    def test_noise_step_raises_mean_risk(self):
        # mid-sequence measurement degradation must lift the fused score
        # (paired-run comparison over 10 seeds)
        wins = 0
        for seed in range(10):
            rng = np.random.default_rng(100 + seed)
            mon = RiskMonitor(RiskConfig())
            pre, post = [], []
            for k in range(120):
                res_scale = 1.0 if k < 60 else 8.0
                fi = make_frame_input(k, k * 0.05, 60, rng)
                fi.residuals = fi.residuals * res_scale
                fi.sigma_blocks = fi.sigma_blocks * res_scale
                rec = mon.process(fi)
                (pre if k < 60 else post).append(rec.r_raw)
            if np.mean(post) > np.mean(pre[15:]):
                wins += 1
        assert wins == 10
