"""Camera geometry: poses, pinhole stereo projection, and its Jacobians.

Conventions
-----------
A pose maps world points into the camera frame: p_cam = R @ p_world + t.
The camera looks along +z, x right, y down. Stereo measurements are
(u, v, disparity) of the left camera with the right camera offset by the
baseline along +x; disparity = f * b / z.

Pose increments are local 6-vectors [dtheta, dt] composed on the left:
R <- exp(dtheta) R,  t <- t + dt.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError


def skew(w: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(w) @ v == cross(w, v)."""
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; exact for all angles, series near zero."""
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < 1e-9:
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R; inverse of so3_exp away from pi."""
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-9:
        return 0.5 * np.array([R[2, 1] - R[1, 2],
                               R[0, 2] - R[2, 0],
                               R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * np.array([
        R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


@dataclass
class Pose:
    """World-to-camera rigid transform."""

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) into the camera frame."""
        return points @ self.R.T + self.t

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def perturbed(self, delta: np.ndarray) -> "Pose":
        """Apply a local increment [dtheta, dt] on the left."""
        return Pose(so3_exp(delta[:3]) @ self.R, self.t + delta[3:])

    def copy(self) -> "Pose":
        return Pose(self.R.copy(), self.t.copy())


def look_at(center: np.ndarray, target: np.ndarray,
            up: np.ndarray | None = None) -> Pose:
    """Pose of a camera at `center` whose optical axis points at `target`."""
    if up is None:
        up = np.array([0.0, 0.0, 1.0])
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ValueError("view direction parallel to up vector")
    x = x / nx
    y = np.cross(z, x)
    R_wc = np.column_stack([x, y, z])  # camera axes in world
    R = R_wc.T
    return Pose(R, -R @ center)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole stereo camera with square pixels."""

    focal_px: float
    cu: float
    cv: float
    baseline_m: float
    width: int
    height: int

    def max_disparity(self, min_depth: float) -> float:
        return self.focal_px * self.baseline_m / min_depth


def project_stereo(pose: Pose, landmark: np.ndarray,
                   intr: Intrinsics) -> np.ndarray:
    """Project one world point; returns (u, v, disparity).

    Raises BehindCameraError when the point has non-positive depth.
    """
    p = pose.R @ landmark + pose.t
    z = p[2]
    if z <= 0.0:
        raise BehindCameraError(f"depth {z:.6g} <= 0")
    f = intr.focal_px
    return np.array([
        f * p[0] / z + intr.cu,
        f * p[1] / z + intr.cv,
        f * intr.baseline_m / z,
    ])


def project_stereo_batch(pose: Pose, landmarks: np.ndarray,
                         intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection of (n, 3) world points.

    Returns (measurements (n, 3), depths (n,)); caller filters on depth.
    """
    p = landmarks @ pose.R.T + pose.t
    z = p[:, 2]
    f = intr.focal_px
    with np.errstate(divide="ignore", invalid="ignore"):
        meas = np.column_stack([
            f * p[:, 0] / z + intr.cu,
            f * p[:, 1] / z + intr.cv,
            f * intr.baseline_m / z,
        ])
    return meas, z


def stereo_point_jacobian(p_cam: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """d(u, v, disparity)/d(p_cam); 3x3, invertible for z > 0."""
    x, y, z = p_cam
    f = intr.focal_px
    iz = 1.0 / z
    iz2 = iz * iz
    return np.array([
        [f * iz, 0.0, -f * x * iz2],
        [0.0, f * iz, -f * y * iz2],
        [0.0, 0.0, -f * intr.baseline_m * iz2],
    ])


def stereo_world_jacobian(pose: Pose, landmark: np.ndarray,
                          intr: Intrinsics) -> np.ndarray:
    """d(u, v, disparity)/d(landmark_world); 3x3."""
    p = pose.R @ landmark + pose.t
    if p[2] <= 0.0:
        raise BehindCameraError(f"depth {p[2]:.6g} <= 0")
    return stereo_point_jacobian(p, intr) @ pose.R


def stereo_pose_jacobian(pose: Pose, landmark: np.ndarray,
                         intr: Intrinsics) -> np.ndarray:
    """d(u, v, disparity)/d[dtheta, dt] for a left-composed increment; 3x6."""
    p = pose.R @ landmark + pose.t
    if p[2] <= 0.0:
        raise BehindCameraError(f"depth {p[2]:.6g} <= 0")
    Jp = stereo_point_jacobian(p, intr)
    # d p_cam/d dtheta = -[p - t]x ; d p_cam/d dt = I
    J = np.empty((3, 6))
    J[:, :3] = Jp @ (-skew(p - pose.t))
    J[:, 3:] = Jp
    return J
