"""Synthetic stereo scenes: trajectories, landmarks, and tracked features.

Everything downstream (backend, corruption, risk, evaluation) runs on the
observation streams produced here. Generation is deterministic per seed;
measurement noise, landmark placement, and feature recruitment each draw
from independent derived streams so layers can be varied independently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ConfigError, DegenerateGeometryError
from .geometry import Intrinsics, Pose, look_at, project_stereo_batch

TRAJECTORY_KINDS = ("line", "circle", "figure-eight")

# landmarks must project at least this far inside the image for a track,
# so that clean measurement noise cannot push them out of bounds
_VISIBILITY_MARGIN_FACTOR = 6.0
_VISIBILITY_MARGIN_MIN = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    trajectory_kind: str = "circle"
    num_frames: int = 200
    frame_rate_hz: float = 20.0
    num_landmarks: int = 500
    features_per_frame_target: int = 200
    stereo_baseline: float = 0.11
    focal_length: float = 525.0
    image_width: int = 640
    image_height: int = 480
    measurement_noise_px: float = 0.5
    trajectory_scale: float = 5.0
    min_depth: float = 0.3
    max_depth: float = 60.0

    def validate(self) -> None:
        if self.trajectory_kind not in TRAJECTORY_KINDS:
            raise ConfigError(f"unknown trajectory {self.trajectory_kind!r}")
        for name in ("num_frames", "num_landmarks",
                     "features_per_frame_target"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("stereo_baseline", "focal_length", "frame_rate_hz",
                     "trajectory_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.measurement_noise_px < 0:
            raise ConfigError("measurement_noise_px must be >= 0")
        if self.image_width < 2 or self.image_height < 2:
            raise ConfigError("image size too small")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            focal_px=self.focal_length,
            cu=self.image_width / 2.0,
            cv=self.image_height / 2.0,
            baseline_m=self.stereo_baseline,
            width=self.image_width,
            height=self.image_height,
        )


@dataclass
class GroundTruth:
    poses: list[Pose]
    landmarks: np.ndarray  # (n, 3)


@dataclass
class Observation:
    feature_id: int
    landmark_id: int
    u: float
    v: float
    disparity: float
    is_outlier_injected: bool = False


@dataclass
class FrameObservations:
    frame_id: int
    timestamp: float
    observations: list[Observation] = field(default_factory=list)


def trajectory_centers(config: ScenarioConfig) -> np.ndarray:
    """Camera centers along the configured path; (num_frames, 3)."""
    n = config.num_frames
    s = config.trajectory_scale
    u = np.arange(n) / max(n - 1, 1)
    if config.trajectory_kind == "line":
        x = s * (u - 0.5)
        return np.column_stack([x, -s * np.ones(n), 0.1 * s * np.ones(n)])
    if config.trajectory_kind == "circle":
        theta = 2.0 * np.pi * u
        return np.column_stack([s * np.cos(theta), s * np.sin(theta),
                                0.1 * s * np.ones(n)])
    # figure-eight (lemniscate of Gerono), kept outside the landmark cloud
    theta = 2.0 * np.pi * u
    return np.column_stack([
        1.5 * s * np.sin(theta / 2.0) - 2.5 * s,
        s * np.sin(theta),
        0.1 * s * np.ones(n),
    ])


def _generate_landmarks(config: ScenarioConfig) -> np.ndarray:
    """Uniform ball of landmarks around the scene origin."""
    gen = rng.stream(config.seed, rng.TAG_LANDMARKS)
    radius = 0.45 * config.trajectory_scale
    pts = np.empty((config.num_landmarks, 3))
    filled = 0
    while filled < config.num_landmarks:
        cand = gen.uniform(-radius, radius, size=(config.num_landmarks, 3))
        keep = cand[np.einsum("ni,ni->n", cand, cand) <= radius * radius]
        take = min(len(keep), config.num_landmarks - filled)
        pts[filled:filled + take] = keep[:take]
        filled += take
    return pts


def _visible_mask(pose: Pose, landmarks: np.ndarray,
                  config: ScenarioConfig) -> tuple[np.ndarray, np.ndarray]:
    intr = config.intrinsics
    meas, depth = project_stereo_batch(pose, landmarks, intr)
    margin = max(_VISIBILITY_MARGIN_FACTOR * config.measurement_noise_px,
                 _VISIBILITY_MARGIN_MIN)
    ok = (depth > config.min_depth) & (depth < config.max_depth)
    ok &= (meas[:, 0] >= margin) & (meas[:, 0] <= intr.width - margin)
    ok &= (meas[:, 1] >= margin) & (meas[:, 1] <= intr.height - margin)
    return ok, meas


def generate_scenario(
        config: ScenarioConfig) -> tuple[GroundTruth, list[FrameObservations]]:
    """Build ground truth and the noisy tracked-feature stream.

    Tracks persist while their landmark stays visible; new landmarks are
    recruited each frame to hold the per-frame feature target. Raises
    DegenerateGeometryError if any frame sees fewer than 10 landmarks.
    """
    config.validate()
    centers = trajectory_centers(config)
    target = np.zeros(3)
    poses = [look_at(c, target) for c in centers]
    landmarks = _generate_landmarks(config)
    truth = GroundTruth(poses=poses, landmarks=landmarks)

    frames: list[FrameObservations] = []
    tracked: dict[int, int] = {}  # landmark_id -> feature_id
    next_feature_id = 0
    noise_sd = config.measurement_noise_px

    for frame_id, pose in enumerate(poses):
        ok, meas = _visible_mask(pose, landmarks, config)
        visible = np.flatnonzero(ok)
        if len(visible) < 10:
            raise DegenerateGeometryError(
                f"frame {frame_id}: only {len(visible)} visible landmarks")
        visible_set = set(visible.tolist())
        tracked = {lm: fid for lm, fid in tracked.items()
                   if lm in visible_set}

        deficit = config.features_per_frame_target - len(tracked)
        if deficit > 0:
            candidates = np.array(sorted(visible_set - tracked.keys()))
            if len(candidates) > 0:
                recruit_gen = rng.stream(config.seed, rng.TAG_RECRUIT,
                                         frame_id)
                take = min(deficit, len(candidates))
                chosen = recruit_gen.choice(candidates, size=take,
                                            replace=False)
                for lm in sorted(int(c) for c in chosen):
                    tracked[lm] = next_feature_id
                    next_feature_id += 1

        frame = FrameObservations(
            frame_id=frame_id,
            timestamp=frame_id / config.frame_rate_hz,
        )
        tracked_ids = sorted(tracked.keys())
        noisy = meas[tracked_ids]
        if noise_sd > 0.0 and tracked_ids:
            noisy = noisy + noise_sd * rng.normal_field(
                config.seed, rng.TAG_MEASUREMENT, frame_id, tracked_ids, 3)
        for row, lm in enumerate(tracked_ids):
            frame.observations.append(Observation(
                feature_id=tracked[lm],
                landmark_id=int(lm),
                u=float(noisy[row, 0]),
                v=float(noisy[row, 1]),
                disparity=float(noisy[row, 2]),
            ))
        frames.append(frame)
    return truth, frames
