"""Severity-graded degradation of feature observation streams.

Image-domain corruptions are re-expressed by their dominant effect on
feature tracking: localization noise (additive/blur/speckle), dropout
(blur/occlusion), quantization (compression), and outliers (salt-pepper).
Severity 0 is the identity for every kind. All draws derive from
(spec.seed, kind, frame, feature), independent of the base scene streams.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigError
from .scene import FrameObservations, Observation, ScenarioConfig

KINDS = ("additive_noise", "blur_proxy", "compression_proxy", "occlusion",
         "salt_pepper", "speckle", "combined")

_KIND_CODE = {k: i + 1 for i, k in enumerate(KINDS)}

# severity tables, index 0..4; defaults, overridable per spec
ADDITIVE_STD_PX = (0.0, 0.5, 1.0, 2.0, 4.0)
BLUR_STD_PX = (0.0, 0.3, 0.6, 1.2, 2.4)
BLUR_DROPOUT = (0.0, 0.05, 0.10, 0.20, 0.30)
COMPRESSION_GRID_PX = (0.0, 0.25, 0.5, 1.0, 2.0)
OCCLUSION_COVERAGE = (0.0, 0.10, 0.25, 0.50, 0.75)
SALT_PEPPER_PROB = (0.0, 0.01, 0.03, 0.08, 0.15)
SPECKLE_FACTOR = (0.0, 0.002, 0.005, 0.01, 0.02)

# effect sub-stream codes (xor-ed into the derivation)
_FX_ADDITIVE = 0x10
_FX_BLUR_NOISE = 0x20
_FX_BLUR_DROP = 0x30
_FX_SALT = 0x40
_FX_SPECKLE = 0x50
_FX_ANCHOR = 0x60


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "additive_noise"
    severity: int = 0
    seed: int = 0
    window: tuple[int, int] | None = None  # [start, end) frames
    level_override: float | None = None    # kind's primary magnitude

    def validate(self, num_frames: int | None = None) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 4:
            raise ConfigError("severity must be in 0..4")
        if self.window is not None:
            s, e = self.window
            if s < 0 or e < s:
                raise ConfigError("corruption window must satisfy "
                                  "0 <= start <= end")
            if num_frames is not None and e > num_frames:
                raise ConfigError("corruption window beyond sequence end")

    def active(self, frame_id: int) -> bool:
        if self.severity == 0:
            return False
        if self.window is None:
            return True
        return self.window[0] <= frame_id < self.window[1]

    def tag(self) -> str:
        w = "" if self.window is None else \
            f"_w{self.window[0]}-{self.window[1]}"
        return f"{self.kind}_s{self.severity}{w}_seed{self.seed}"


def _copy_frame(frame: FrameObservations) -> FrameObservations:
    return FrameObservations(
        frame_id=frame.frame_id,
        timestamp=frame.timestamp,
        observations=[replace(o) for o in frame.observations],
    )


def _columns(frame: FrameObservations):
    ids = np.array([o.feature_id for o in frame.observations],
                   dtype=np.int64)
    meas = np.array([[o.u, o.v, o.disparity]
                     for o in frame.observations]).reshape(len(ids), 3)
    return ids, meas


def _rebuild(frame: FrameObservations, meas: np.ndarray,
             keep: np.ndarray, outlier: np.ndarray) -> FrameObservations:
    obs = []
    for row, o in enumerate(frame.observations):
        if not keep[row]:
            continue
        obs.append(Observation(
            feature_id=o.feature_id,
            landmark_id=o.landmark_id,
            u=float(meas[row, 0]),
            v=float(meas[row, 1]),
            disparity=float(meas[row, 2]),
            is_outlier_injected=bool(o.is_outlier_injected or outlier[row]),
        ))
    return FrameObservations(frame.frame_id, frame.timestamp, obs)


def occlusion_rect(spec: CorruptionSpec, coverage: float,
                   config: ScenarioConfig) -> tuple[float, float, float,
                                                    float]:
    """Fixed axis-aligned rectangle (x0, y0, x1, y1) for one run."""
    w = config.image_width * np.sqrt(coverage)
    h = config.image_height * np.sqrt(coverage)
    gen = rng.stream(spec.seed, rng.TAG_CORRUPTION,
                     _KIND_CODE[spec.kind] ^ _FX_ANCHOR)
    x0 = gen.uniform(0.0, max(config.image_width - w, 0.0))
    y0 = gen.uniform(0.0, max(config.image_height - h, 0.0))
    return x0, y0, x0 + w, y0 + h


def apply(spec: CorruptionSpec, frames: list[FrameObservations],
          config: ScenarioConfig) -> list[FrameObservations]:
    """Corrupted copy of the stream; the input is never mutated."""
    spec.validate()
    sev = spec.severity
    kind = spec.kind
    code = _KIND_CODE[kind]
    intr = config.intrinsics

    rect = None
    if kind in ("occlusion", "combined"):
        coverage = OCCLUSION_COVERAGE[sev]
        if kind == "occlusion" and spec.level_override is not None:
            coverage = float(spec.level_override)
        if coverage > 0.0:
            rect = occlusion_rect(spec, coverage, config)

    out = []
    for frame in frames:
        if not spec.active(frame.frame_id):
            out.append(_copy_frame(frame))
            continue
        ids, meas = _columns(frame)
        n = len(ids)
        if n == 0:
            out.append(_copy_frame(frame))
            continue
        keep = np.ones(n, dtype=bool)
        outlier = np.zeros(n, dtype=bool)
        fid = frame.frame_id

        if kind in ("additive_noise", "combined"):
            std = ADDITIVE_STD_PX[sev]
            if kind == "additive_noise" and spec.level_override is not None:
                std = float(spec.level_override)
            if std > 0.0:
                meas = meas + std * rng.normal_field(
                    spec.seed, rng.TAG_CORRUPTION, fid ^ (code + _FX_ADDITIVE) * 0x10000,
                    ids, 3)
        if kind == "blur_proxy":
            std = BLUR_STD_PX[sev]
            if spec.level_override is not None:
                std = float(spec.level_override)
            if std > 0.0:
                meas = meas + std * rng.normal_field(
                    spec.seed, rng.TAG_CORRUPTION,
                    fid ^ (code + _FX_BLUR_NOISE) * 0x10000, ids, 3)
            drop = BLUR_DROPOUT[sev]
            if drop > 0.0:
                u = rng.uniform_field(
                    spec.seed, rng.TAG_CORRUPTION,
                    fid ^ (code + _FX_BLUR_DROP) * 0x10000, ids, 1)[:, 0]
                keep &= u >= drop
        if kind == "compression_proxy":
            q = COMPRESSION_GRID_PX[sev]
            if spec.level_override is not None:
                q = float(spec.level_override)
            if q > 0.0:
                meas = np.round(meas / q) * q
        if kind == "salt_pepper":
            p = SALT_PEPPER_PROB[sev]
            if spec.level_override is not None:
                p = float(spec.level_override)
            if p > 0.0:
                u = rng.uniform_field(
                    spec.seed, rng.TAG_CORRUPTION,
                    fid ^ (code + _FX_SALT) * 0x10000, ids, 4)
                hit = u[:, 0] < p
                disp_hi = intr.max_disparity(config.min_depth)
                disp_lo = intr.max_disparity(config.max_depth)
                meas = meas.copy()
                meas[hit, 0] = u[hit, 1] * config.image_width
                meas[hit, 1] = u[hit, 2] * config.image_height
                meas[hit, 2] = disp_lo + u[hit, 3] * (disp_hi - disp_lo)
                outlier |= hit
        if kind == "speckle":
            factor = SPECKLE_FACTOR[sev]
            if spec.level_override is not None:
                factor = float(spec.level_override)
            if factor > 0.0:
                noise = rng.normal_field(
                    spec.seed, rng.TAG_CORRUPTION,
                    fid ^ (code + _FX_SPECKLE) * 0x10000, ids, 3)
                meas = meas + factor * np.abs(meas) * noise
        if rect is not None:
            x0, y0, x1, y1 = rect
            inside = ((meas[:, 0] >= x0) & (meas[:, 0] < x1)
                      & (meas[:, 1] >= y0) & (meas[:, 1] < y1))
            keep &= ~inside

        out.append(_rebuild(frame, meas, keep, outlier))
    return out


def corruption_grid(kinds, severities, seeds,
                    window: tuple[int, int] | None = None
                    ) -> list[CorruptionSpec]:
    """Cartesian experiment batch in deterministic product order."""
    specs = []
    for kind, sev, seed in itertools.product(kinds, severities, seeds):
        spec = CorruptionSpec(kind=kind, severity=int(sev), seed=int(seed),
                              window=window)
        spec.validate()
        specs.append(spec)
    return specs
