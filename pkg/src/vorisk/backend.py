"""Sliding-window stereo bundle adjustment (Gauss-Newton / LM).

The solver works on (u, v, disparity) triples so a single stereo
observation fully constrains a landmark; gauge freedom is removed by
anchoring the oldest pose in the window. Per-frame outputs expose the
reprojection residuals, pixel-projection Jacobians, and the block normal
matrix of the last linearization, together with the factorization of the
landmark-reduced pose system formed during the linear solve (the risk
layer reuses it instead of re-marginalizing from scratch).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .errors import (DivergedError, InsufficientParallaxError,
                     RankDeficientError, WindowUnderflowError)
from .geometry import Intrinsics, Pose
from .scene import FrameObservations

_DEPTH_FLOOR = 1e-6
_REL_COST_TOL = 1e-9
# cost charged per observation whose landmark sits behind the camera at
# the evaluated state; finite so LM can still climb out, large enough
# that hiding a row never looks like progress
_HIDDEN_ROW_COST = 1e7


@dataclass
class BackendConfig:
    window_size: int = 8
    max_iterations: int = 3
    lm_initial: float = 1e-4
    lm_min: float = 1e-10
    lm_max: float = 1e8
    sigma_px: float = 0.5          # working measurement std for weighting
    step_tol: float = 1e-10
    max_escalations: int = 5
    min_depth: float = 0.05
    max_depth: float = 1e4
    innovation_gate_px: float = 50.0   # reject new obs far off prediction
    cull_residual_px: float = 25.0     # drop landmarks tracking that badly
    activation_agreement_m: float = 0.5

    def __post_init__(self):
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        self.sigma_px = max(self.sigma_px, 1e-3)


@dataclass
class WindowState:
    """Poses and landmarks currently being optimized."""

    frame_ids: list[int] = field(default_factory=list)
    poses: list[Pose] = field(default_factory=list)
    active_landmarks: dict[int, np.ndarray] = field(default_factory=dict)
    fixed_gauge: int = 0

    def copy(self) -> "WindowState":
        return WindowState(
            frame_ids=list(self.frame_ids),
            poses=[p.copy() for p in self.poses],
            active_landmarks={k: v.copy()
                              for k, v in self.active_landmarks.items()},
            fixed_gauge=self.fixed_gauge,
        )


@dataclass
class BlockHessian:
    """Gauss-Newton normal matrix in pose/landmark block form.

    Pose blocks cover only the free (non-gauge) poses. ``Bt`` stores the
    pose-landmark coupling transposed, one (3, 6F) stack per landmark,
    the layout the solve and marginalization kernels consume directly.
    """

    H_pp: np.ndarray               # (6F, 6F)
    Bt: np.ndarray                 # (L, 3, 6F) coupling (transposed)
    H_ll: np.ndarray               # (L, 3, 3)
    lambda_lm: float
    landmark_ids: np.ndarray       # (L,) sorted

    @property
    def num_landmarks(self) -> int:
        return len(self.landmark_ids)

    @property
    def pose_dim(self) -> int:
        return self.H_pp.shape[0]

    @property
    def H_pl(self) -> np.ndarray:
        """(6F, 3L) dense coupling view."""
        L = self.num_landmarks
        if L == 0:
            return np.zeros((self.pose_dim, 0))
        return self.Bt.transpose(2, 0, 1).reshape(
            self.pose_dim, 3 * L)

    def landmark_slot(self, landmark_id: int) -> int:
        idx = np.searchsorted(self.landmark_ids, landmark_id)
        if idx >= len(self.landmark_ids) or \
                self.landmark_ids[idx] != landmark_id:
            raise KeyError(f"landmark {landmark_id} not in hessian")
        return int(idx)

    def dense(self, damped: bool = False) -> np.ndarray:
        """Full (6F + 3L) matrix, for oracle tests and raw-H logging."""
        P, L = self.pose_dim, self.num_landmarks
        n = P + 3 * L
        H = np.zeros((n, n))
        H[:P, :P] = self.H_pp
        H[:P, P:] = self.H_pl
        H[P:, :P] = self.H_pl.T
        for i in range(L):
            H[P + 3 * i:P + 3 * i + 3, P + 3 * i:P + 3 * i + 3] = \
                self.H_ll[i]
        if damped:
            H = H + self.lambda_lm * np.eye(n)
        return H

    def scaled(self, alpha: float) -> "BlockHessian":
        """Same system with all information blocks scaled by alpha."""
        return BlockHessian(self.H_pp * alpha, self.Bt * alpha,
                            self.H_ll * alpha, self.lambda_lm,
                            self.landmark_ids)


@dataclass
class SolverCache:
    """Factorization of the landmark-reduced pose system of one solve."""

    chol: tuple | None             # scipy cho_factor of A' = S_pp
    D_damped: np.ndarray           # (L, 3, 3) damped landmark blocks
    M: np.ndarray                  # (L, 3, 3) their inverses
    W: np.ndarray | None           # (L, 3, 6F) M_i Bt_i products
    lambda_lm: float


@dataclass
class SolveOutput:
    """Snapshot of one backend solve at its last linearization point.

    Residuals/Jacobians cover every observation used in the solve; rows of
    the newest frame (``newest_mask``) are what the risk engine consumes.
    """

    residuals: np.ndarray          # (n, 2) pixel residuals
    jacobians: np.ndarray          # (n, 2, 3) d(pixel)/d(world point)
    hessian: BlockHessian
    pose_estimates: list[Pose]
    iterations: int
    converged: bool
    frame_id: int
    timestamp: float
    feature_ids: np.ndarray        # (n,)
    landmark_ids: np.ndarray       # (n,)
    obs_frame_ids: np.ndarray      # (n,)
    newest_mask: np.ndarray        # (n,) bool
    cost: float
    sigma_hat: float               # robust residual scale (px)
    noise_scale: float             # (sigma_px / sigma_hat)^2
    newest_count: int = 0          # newest-frame rows (tail block)
    lin_window: WindowState | None = None
    solver_cache: SolverCache | None = None


def triangulate(poses: list[Pose], pixels: np.ndarray, intr: Intrinsics,
                cond_limit: float = 1e8) -> np.ndarray:
    """Linear least-squares triangulation from (u, v) rays.

    Raises InsufficientParallaxError when the 3x3 normal matrix condition
    number exceeds ``cond_limit`` (e.g. repeated identical poses).
    """
    if len(poses) < 2:
        raise ValueError("need >= 2 observations")
    N = np.zeros((3, 3))
    y = np.zeros(3)
    for pose, (u, v) in zip(poses, np.atleast_2d(pixels)):
        mx = (u - intr.cu) / intr.focal_px
        my = (v - intr.cv) / intr.focal_px
        C = np.array([[1.0, 0.0, -mx], [0.0, 1.0, -my]])
        A = C @ pose.R
        b = -C @ pose.t
        N += A.T @ A
        y += A.T @ b
    w = np.linalg.eigvalsh(N)
    if w[0] <= 0.0 or w[-1] / w[0] > cond_limit:
        cond = np.inf if w[0] <= 0 else w[-1] / w[0]
        raise InsufficientParallaxError(
            f"triangulation condition {cond:.3g}")
    return np.linalg.solve(N, y)


def stereo_backproject(u: float, v: float, disparity: float, pose: Pose,
                       intr: Intrinsics) -> np.ndarray | None:
    """World point implied by one stereo measurement; None if depth is
    outside a sane range."""
    if disparity <= 0.0:
        return None
    z = intr.focal_px * intr.baseline_m / disparity
    if not (1e-3 <= z <= 1e5):
        return None
    x = (u - intr.cu) * z / intr.focal_px
    y = (v - intr.cv) * z / intr.focal_px
    return pose.R.T @ (np.array([x, y, z]) - pose.t)


class _FrameArrays:
    """Column form of one frame's observations."""

    __slots__ = ("frame_id", "timestamp", "landmark_ids", "feature_ids",
                 "meas", "outlier_flags")

    def __init__(self, frame: FrameObservations):
        self.frame_id = frame.frame_id
        self.timestamp = frame.timestamp
        n = len(frame.observations)
        self.landmark_ids = np.fromiter(
            (o.landmark_id for o in frame.observations), dtype=np.int64,
            count=n)
        self.feature_ids = np.fromiter(
            (o.feature_id for o in frame.observations), dtype=np.int64,
            count=n)
        self.meas = np.array(
            [[o.u, o.v, o.disparity] for o in frame.observations]
        ).reshape(n, 3)
        self.outlier_flags = np.fromiter(
            (o.is_outlier_injected for o in frame.observations),
            dtype=bool, count=n)


class _Assembly:
    """All per-observation quantities of one linearization."""

    __slots__ = ("H_pp", "Bt", "H_ll", "g_p", "g_l", "landmark_ids",
                 "residuals_px", "J_pix", "obs_landmark", "obs_feature",
                 "obs_frame", "depths", "cost", "pose_dim")


def _window_arrays(window: WindowState):
    lm_ids = np.array(sorted(window.active_landmarks.keys()),
                      dtype=np.int64)
    lm_pos = (np.array([window.active_landmarks[int(i)] for i in lm_ids])
              if len(lm_ids) else np.zeros((0, 3)))
    return lm_ids, lm_pos


def assemble(window: WindowState, frames: list[_FrameArrays],
             intr: Intrinsics, sigma_px: float) -> _Assembly:
    """Accumulate the weighted normal matrix at the current estimates.

    Observations of inactive landmarks, or with non-positive depth at the
    current linearization point, are skipped.
    """
    lm_ids, lm_pos = _window_arrays(window)
    L = len(lm_ids)
    n_free = max(len(window.poses) - 1, 0)
    P = 6 * n_free
    w = 1.0 / (sigma_px * sigma_px)

    H_pp = np.zeros((P, P))
    Bt = np.zeros((L, 3, P))
    H_ll = np.zeros((L, 3, 3))
    g_p = np.zeros(P)
    g_l = np.zeros((L, 3))

    res_rows, jac_rows, lm_rows, feat_rows, frame_rows, depth_rows = \
        [], [], [], [], [], []
    cost = 0.0
    f = intr.focal_px
    b = intr.baseline_m

    for slot, fa in enumerate(frames):
        if len(fa.landmark_ids) == 0 or L == 0:
            continue
        idx = np.searchsorted(lm_ids, fa.landmark_ids)
        idx_clipped = np.clip(idx, 0, L - 1)
        active = lm_ids[idx_clipped] == fa.landmark_ids
        if not np.any(active):
            continue
        rows = np.flatnonzero(active)
        li = idx_clipped[rows]
        pose = window.poses[slot]
        pts = lm_pos[li]
        p_cam = pts @ pose.R.T + pose.t
        z = p_cam[:, 2]
        good = z > _DEPTH_FLOOR
        if not np.all(good):
            cost += 2.0 * _HIDDEN_ROW_COST * int(np.count_nonzero(~good))
            rows, li, p_cam, z = rows[good], li[good], p_cam[good], z[good]
        n = len(rows)
        if n == 0:
            continue

        iz = 1.0 / z
        iz2 = iz * iz
        pred = np.empty((n, 3))
        pred[:, 0] = f * p_cam[:, 0] * iz + intr.cu
        pred[:, 1] = f * p_cam[:, 1] * iz + intr.cv
        pred[:, 2] = f * b * iz
        r = pred - fa.meas[rows]
        cost += w * float(np.einsum("ni,ni->", r, r))

        J_cam = np.zeros((n, 3, 3))
        J_cam[:, 0, 0] = f * iz
        J_cam[:, 0, 2] = -f * p_cam[:, 0] * iz2
        J_cam[:, 1, 1] = f * iz
        J_cam[:, 1, 2] = -f * p_cam[:, 1] * iz2
        J_cam[:, 2, 2] = -f * b * iz2
        J_x = J_cam @ pose.R
        J_x_T = J_x.transpose(0, 2, 1)

        np.add.at(H_ll, li, w * (J_x_T @ J_x))
        np.add.at(g_l, li, w * (J_x_T @ r[:, :, None])[:, :, 0])

        if slot != window.fixed_gauge:
            free_slot = slot - 1 if slot > window.fixed_gauge else slot
            rot = p_cam - pose.t  # == R @ x
            S = np.zeros((n, 3, 3))
            S[:, 0, 1] = -rot[:, 2]
            S[:, 0, 2] = rot[:, 1]
            S[:, 1, 0] = rot[:, 2]
            S[:, 1, 2] = -rot[:, 0]
            S[:, 2, 0] = -rot[:, 1]
            S[:, 2, 1] = rot[:, 0]
            J_pose = np.empty((n, 3, 6))
            J_pose[:, :, :3] = -(J_cam @ S)
            J_pose[:, :, 3:] = J_cam
            c0 = 6 * free_slot
            H_pp[c0:c0 + 6, c0:c0 + 6] += \
                w * np.tensordot(J_pose, J_pose, axes=([0, 1], [0, 1]))
            g_p[c0:c0 + 6] += \
                w * np.tensordot(J_pose, r, axes=([0, 1], [0, 1]))
            np.add.at(Bt[:, :, c0:c0 + 6], li, w * (J_x_T @ J_pose))

        res_rows.append(r[:, :2])
        jac_rows.append(J_x[:, :2, :])
        lm_rows.append(fa.landmark_ids[rows])
        feat_rows.append(fa.feature_ids[rows])
        frame_rows.append(np.full(n, fa.frame_id, dtype=np.int64))
        depth_rows.append(z)

    out = _Assembly()
    out.H_pp = H_pp
    out.Bt = Bt
    out.H_ll = H_ll
    out.g_p = g_p
    out.g_l = g_l
    out.landmark_ids = lm_ids
    out.pose_dim = P
    out.cost = 0.5 * cost
    if res_rows:
        out.residuals_px = np.vstack(res_rows)
        out.J_pix = np.ascontiguousarray(np.concatenate(jac_rows, axis=0))
        out.obs_landmark = np.concatenate(lm_rows)
        out.obs_feature = np.concatenate(feat_rows)
        out.obs_frame = np.concatenate(frame_rows)
        out.depths = np.concatenate(depth_rows)
    else:
        out.residuals_px = np.zeros((0, 2))
        out.J_pix = np.zeros((0, 2, 3))
        out.obs_landmark = np.zeros(0, dtype=np.int64)
        out.obs_feature = np.zeros(0, dtype=np.int64)
        out.obs_frame = np.zeros(0, dtype=np.int64)
        out.depths = np.zeros(0)
    return out


def check_landmark_blocks(H_ll: np.ndarray, landmark_ids: np.ndarray) -> None:
    """Raise RankDeficientError if any undamped landmark block is singular."""
    if len(H_ll) == 0:
        return
    _, cond = _kernels.sym_inv3(np.ascontiguousarray(H_ll))
    bad = np.flatnonzero(~np.isfinite(cond) | (cond > 1e14))
    if len(bad):
        raise RankDeficientError(
            f"landmark block {int(landmark_ids[bad[0]])} singular "
            "before damping")


def _solve_to_output(asm: _Assembly, window: WindowState,
                     frames: list[_FrameArrays], lambda_lm: float,
                     sigma_px: float) -> SolveOutput:
    hess = BlockHessian(asm.H_pp, asm.Bt, asm.H_ll, lambda_lm,
                        asm.landmark_ids)
    newest = (asm.obs_frame == frames[-1].frame_id) if frames else \
        np.zeros(0, dtype=bool)
    n_newest = int(newest.sum())
    return SolveOutput(
        residuals=asm.residuals_px,
        jacobians=asm.J_pix,
        hessian=hess,
        pose_estimates=[p.copy() for p in window.poses],
        iterations=0,
        converged=False,
        frame_id=frames[-1].frame_id if frames else -1,
        timestamp=frames[-1].timestamp if frames else 0.0,
        feature_ids=asm.obs_feature,
        landmark_ids=asm.obs_landmark,
        obs_frame_ids=asm.obs_frame,
        newest_mask=newest,
        cost=asm.cost,
        sigma_hat=sigma_px,
        noise_scale=1.0,
        newest_count=n_newest,
        lin_window=window,
    )


def assemble_normal_matrix(window: WindowState,
                           frames: list[FrameObservations],
                           intr: Intrinsics, sigma_px: float,
                           lambda_lm: float = 0.0,
                           strict: bool = True) -> SolveOutput:
    """Pre-solve snapshot: residuals, Jacobians, and the block Hessian."""
    fas = [f if isinstance(f, _FrameArrays) else _FrameArrays(f)
           for f in frames]
    asm = assemble(window, fas, intr, sigma_px)
    if strict:
        check_landmark_blocks(asm.H_ll, asm.landmark_ids)
    return _solve_to_output(asm, window, fas, lambda_lm, sigma_px)


def solve_damped(asm: _Assembly, lambda_lm: float
                 ) -> tuple[np.ndarray, np.ndarray, SolverCache]:
    """Solve (H + lambda I) delta = -g by reducing landmarks first.

    Returns (delta_poses (P,), delta_landmarks (L, 3), cache) where the
    cache holds the reduced-system factorization for covariance reuse.
    """
    L = len(asm.landmark_ids)
    P = asm.pose_dim
    D = np.ascontiguousarray(asm.H_ll + lambda_lm * np.eye(3))
    M, cond = _kernels.sym_inv3(D)
    if np.any(~np.isfinite(cond)):
        raise RankDeficientError("landmark block singular after damping")
    if P == 0:
        dl = -(M @ asm.g_l[:, :, None])[:, :, 0] if L else np.zeros((0, 3))
        return np.zeros(0), dl, SolverCache(None, D, M, None, lambda_lm)
    A = asm.H_pp + lambda_lm * np.eye(P)
    W = None
    if L:
        W = M @ asm.Bt                            # (L, 3, P)
        S_pp = A - np.tensordot(asm.Bt, W, axes=([0, 1], [0, 1]))
        S_pp = 0.5 * (S_pp + S_pp.T)
        rhs = -asm.g_p + np.tensordot(W, asm.g_l, axes=([0, 1], [0, 1]))
    else:
        S_pp = A
        rhs = -asm.g_p
    try:
        c = cho_factor(S_pp, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise RankDeficientError(f"reduced pose system not SPD: {exc}")
    dp = cho_solve(c, rhs, check_finite=False)
    if L:
        dl = -(M @ (asm.g_l + asm.Bt @ dp)[:, :, None])[:, :, 0]
    else:
        dl = np.zeros((0, 3))
    return dp, dl, SolverCache(c, D, M, W, lambda_lm)


def apply_step(window: WindowState, landmark_ids: np.ndarray,
               dp: np.ndarray, dl: np.ndarray) -> WindowState:
    """Window with the local step applied; the gauge pose is untouched."""
    new = window.copy()
    free = 0
    for slot in range(len(new.poses)):
        if slot == new.fixed_gauge:
            continue
        d = dp[6 * free:6 * free + 6]
        new.poses[slot] = new.poses[slot].perturbed(d)
        free += 1
    for i, lm in enumerate(landmark_ids):
        new.active_landmarks[int(lm)] = \
            new.active_landmarks[int(lm)] + dl[i]
    return new


def evaluate_cost(window: WindowState, frames: list[_FrameArrays],
                  intr: Intrinsics, sigma_px: float) -> float:
    """Weighted half-SSE of all usable observations at the given state."""
    lm_ids, lm_pos = _window_arrays(window)
    L = len(lm_ids)
    if L == 0:
        return 0.0
    w = 1.0 / (sigma_px * sigma_px)
    f, b = intr.focal_px, intr.baseline_m
    cost = 0.0
    for slot, fa in enumerate(frames):
        if len(fa.landmark_ids) == 0:
            continue
        idx = np.clip(np.searchsorted(lm_ids, fa.landmark_ids), 0, L - 1)
        active = lm_ids[idx] == fa.landmark_ids
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            continue
        pose = window.poses[slot]
        p_cam = lm_pos[idx[rows]] @ pose.R.T + pose.t
        z = p_cam[:, 2]
        good = z > _DEPTH_FLOOR
        if not np.all(good):
            cost += 2.0 * _HIDDEN_ROW_COST * int(np.count_nonzero(~good))
            rows, p_cam, z = rows[good], p_cam[good], z[good]
            if len(rows) == 0:
                continue
        pred = np.empty((len(rows), 3))
        pred[:, 0] = f * p_cam[:, 0] / z + intr.cu
        pred[:, 1] = f * p_cam[:, 1] / z + intr.cv
        pred[:, 2] = f * b / z
        r = pred - fa.meas[rows]
        cost += w * float(np.einsum("ni,ni->", r, r))
    return 0.5 * cost


@dataclass
class StepResult:
    window: WindowState
    lambda_lm: float               # next damping (schedule applied)
    lambda_used: float             # damping of the accepted solve
    cost_before: float
    cost_after: float
    step_norm: float
    escalations: int
    assembly: _Assembly
    cache: SolverCache
    lin_window: WindowState | None = None


def gauss_newton_step(window: WindowState, frames: list[FrameObservations],
                      intr: Intrinsics, sigma_px: float,
                      lambda_lm: float, config: BackendConfig | None = None
                      ) -> StepResult:
    """One accepted Levenberg-Marquardt step (x10 on reject, /10 on accept).

    Raises DivergedError after ``max_escalations`` consecutive rejections.
    """
    cfg = config or BackendConfig()
    fas = [f if isinstance(f, _FrameArrays) else _FrameArrays(f)
           for f in frames]
    asm = assemble(window, fas, intr, sigma_px)
    lam = lambda_lm
    escalations = 0
    while True:
        dp, dl, cache = solve_damped(asm, lam)
        candidate = apply_step(window, asm.landmark_ids, dp, dl)
        new_cost = evaluate_cost(candidate, fas, intr, sigma_px)
        step_norm = float(np.sqrt(np.dot(dp, dp) +
                                  np.einsum("ni,ni->", dl, dl)))
        if new_cost <= asm.cost + 1e-15:
            return StepResult(candidate, max(lam / 10.0, cfg.lm_min), lam,
                              asm.cost, new_cost, step_norm, escalations,
                              asm, cache, lin_window=window)
        escalations += 1
        if escalations >= cfg.max_escalations:
            raise DivergedError(
                f"cost increased through {escalations} damping escalations")
        lam = min(lam * 10.0, cfg.lm_max)


def slide_window(window: WindowState,
                 observer_counts: dict[int, int]) -> WindowState:
    """Drop the oldest pose; retire landmarks left with < 2 observers.

    ``observer_counts`` maps landmark_id -> number of remaining window
    frames observing it (after the drop).
    """
    if len(window.poses) <= 2:
        raise WindowUnderflowError("window would shrink below 2 poses")
    new = window.copy()
    new.frame_ids = new.frame_ids[1:]
    new.poses = new.poses[1:]
    new.active_landmarks = {
        lm: x for lm, x in new.active_landmarks.items()
        if observer_counts.get(lm, 0) >= 2
    }
    return new


class SlidingWindowEstimator:
    """Per-frame driver: slide, activate landmarks, optimize, snapshot."""

    def __init__(self, intr: Intrinsics, config: BackendConfig | None = None,
                 anchor_pose: Pose | None = None):
        self.intr = intr
        self.config = config or BackendConfig()
        self.anchor_pose = anchor_pose or Pose(np.eye(3), np.zeros(3))
        self.window = WindowState()
        self.window_frames: list[_FrameArrays] = []
        self.lambda_lm = self.config.lm_initial
        self.diverged = False

    def _observer_counts(self, frames: list[_FrameArrays]) -> dict[int, int]:
        if not frames:
            return {}
        all_ids = np.concatenate([f.landmark_ids for f in frames])
        ids, counts = np.unique(all_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def _activate_landmarks(self, counts: dict[int, int]) -> None:
        """Activate landmarks seen >= 2 times whose stereo backprojections
        from two different sightings agree (multi-view consistency gate)."""
        active = self.window.active_landmarks
        for lm, cnt in counts.items():
            if cnt < 2 or lm in active:
                continue
            points = []
            for ofa, opose in zip(self.window_frames, self.window.poses):
                hit = np.flatnonzero(ofa.landmark_ids == lm)
                if len(hit):
                    pt = stereo_backproject(
                        ofa.meas[hit[0], 0], ofa.meas[hit[0], 1],
                        ofa.meas[hit[0], 2], opose, self.intr)
                    if pt is not None:
                        points.append(pt)
                if len(points) == 2:
                    break
            if len(points) < 2:
                continue
            gap = float(np.linalg.norm(points[0] - points[1]))
            depth = max((points[0][2] + points[1][2]) / 2.0, 1.0)
            if gap <= max(self.config.activation_agreement_m, 0.1 * depth):
                active[lm] = 0.5 * (points[0] + points[1])

    def _gate_innovations(self, fa: _FrameArrays,
                          pose: Pose) -> _FrameArrays:
        """Drop new observations far from their prediction (chi-square
        style gate against gross outliers; inactive landmarks pass)."""
        gate = self.config.innovation_gate_px
        if gate <= 0 or len(fa.landmark_ids) == 0 or \
                not self.window.active_landmarks:
            return fa
        keep = np.ones(len(fa.landmark_ids), dtype=bool)
        lm_ids, lm_pos = _window_arrays(self.window)
        idx = np.clip(np.searchsorted(lm_ids, fa.landmark_ids), 0,
                      max(len(lm_ids) - 1, 0))
        if len(lm_ids):
            known_mask = lm_ids[idx] == fa.landmark_ids
            rows = np.flatnonzero(known_mask)
            if len(rows):
                p_cam = lm_pos[idx[rows]] @ pose.R.T + pose.t
                z = p_cam[:, 2]
                ok = z > _DEPTH_FLOOR
                f = self.intr.focal_px
                pred_u = np.where(ok, f * p_cam[:, 0] / np.where(ok, z, 1.0)
                                  + self.intr.cu, 0.0)
                pred_v = np.where(ok, f * p_cam[:, 1] / np.where(ok, z, 1.0)
                                  + self.intr.cv, 0.0)
                du = fa.meas[rows, 0] - pred_u
                dv = fa.meas[rows, 1] - pred_v
                bad = ok & (np.hypot(du, dv) > gate)
                keep[rows[bad]] = False
        if np.all(keep):
            return fa
        out = _FrameArrays.__new__(_FrameArrays)
        out.frame_id = fa.frame_id
        out.timestamp = fa.timestamp
        out.landmark_ids = fa.landmark_ids[keep]
        out.feature_ids = fa.feature_ids[keep]
        out.meas = fa.meas[keep]
        out.outlier_flags = fa.outlier_flags[keep]
        return out

    def _cull_bad_tracks(self, out: SolveOutput) -> None:
        """Deactivate landmarks whose newest residual is hopeless."""
        gate = self.config.cull_residual_px
        k = out.newest_count
        if gate <= 0 or k == 0:
            return
        res = out.residuals[-k:]
        lm = out.landmark_ids[-k:]
        bad = np.hypot(res[:, 0], res[:, 1]) > gate
        for lmid in lm[bad]:
            self.window.active_landmarks.pop(int(lmid), None)

    def process_frame(self, frame: FrameObservations) -> SolveOutput:
        """Ingest one frame, optimize the window, return the snapshot."""
        if self.diverged:
            raise DivergedError("estimator already diverged")
        fa = _FrameArrays(frame)
        cfg = self.config

        if not self.window.poses:
            pose = self.anchor_pose.copy()
        else:
            pose = self.window.poses[-1].copy()  # constant-position predict

        if len(self.window.poses) == cfg.window_size:
            kept = self.window_frames[1:]
            counts = self._observer_counts(kept)
            self.window = slide_window(self.window, counts)
            self.window_frames = kept

        fa = self._gate_innovations(fa, pose)
        self.window.frame_ids.append(frame.frame_id)
        self.window.poses.append(pose)
        self.window_frames.append(fa)
        counts = self._observer_counts(self.window_frames)
        self.window.active_landmarks = {
            lm: x for lm, x in self.window.active_landmarks.items()
            if counts.get(lm, 0) >= 2
        }
        self._activate_landmarks(counts)

        iterations = 0
        converged = False
        last_step: StepResult | None = None
        if self.window.active_landmarks and len(self.window.poses) >= 2:
            for _ in range(cfg.max_iterations):
                try:
                    step = gauss_newton_step(
                        self.window, self.window_frames, self.intr,
                        cfg.sigma_px, self.lambda_lm, cfg)
                except DivergedError:
                    self.diverged = True
                    break
                except RankDeficientError:
                    break
                self.window = step.window
                self.lambda_lm = step.lambda_lm
                last_step = step
                iterations += 1
                decrease = step.cost_before - step.cost_after
                if step.step_norm < cfg.step_tol or \
                        decrease <= _REL_COST_TOL * max(step.cost_before,
                                                        1.0):
                    converged = True
                    break
            else:
                converged = True  # budget exhausted, cost non-increasing

        if last_step is not None:
            out = _solve_to_output(last_step.assembly,
                                   last_step.window, self.window_frames,
                                   last_step.lambda_used, cfg.sigma_px)
            out.lin_window = last_step.lin_window
            out.solver_cache = last_step.cache
            out.cost = last_step.cost_after
        else:
            asm = assemble(self.window, self.window_frames, self.intr,
                           cfg.sigma_px)
            out = _solve_to_output(asm, self.window, self.window_frames,
                                   self.lambda_lm, cfg.sigma_px)
        out.pose_estimates = [p.copy() for p in self.window.poses]
        out.iterations = iterations
        out.converged = converged and not self.diverged
        out.frame_id = frame.frame_id
        out.timestamp = frame.timestamp

        # robust residual scale over the solve's pixel residuals; rescales
        # exported information so covariances stay chi^2-consistent when
        # the actual noise differs from the working sigma
        n = len(out.residuals)
        if n >= 10:
            mad = float(np.median(np.abs(out.residuals)))
            sigma_hat = max(1.4826 * mad, 0.05 * cfg.sigma_px, 1e-6)
        else:
            sigma_hat = cfg.sigma_px
        out.sigma_hat = sigma_hat
        out.noise_scale = (cfg.sigma_px / sigma_hat) ** 2
        self._cull_bad_tracks(out)
        return out
