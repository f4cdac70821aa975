"""Marginal covariance extraction and per-feature uncertainty.

The backend's block normal matrix is reduced to one exact 3x3 marginal
information block per landmark: poses and all sibling landmarks are
marginalized out, so inverting a block gives the true marginal covariance
(equal to the corresponding diagonal block of the dense inverse). The
reduction reuses one Cholesky of the landmark-reduced pose system plus a
rank-3 Woodbury correction per landmark, so the cost stays linear in the
number of landmarks.

Degenerate blocks saturate instead of raising: a monitor must report
maximal risk on singular information, not crash.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .backend import BlockHessian
from .errors import BehindCameraError, PoseBlockSingularError, \
    ZeroJacobianError
from .geometry import Intrinsics, Pose, stereo_world_jacobian

COND_LIMIT_COV = 1e10      # pseudo-inverse + saturation beyond this
KAPPA_CAP = 1e12
_KAPPA_EPS = 1e-12


@dataclass
class SchurSystem:
    """Per-landmark marginal information blocks of one damped system."""

    S: np.ndarray              # (L, 3, 3)
    landmark_ids: np.ndarray   # (L,)
    lambda_lm: float

    def block(self, landmark_id: int) -> np.ndarray:
        idx = np.searchsorted(self.landmark_ids, landmark_id)
        if idx >= len(self.landmark_ids) or \
                self.landmark_ids[idx] != landmark_id:
            raise KeyError(f"landmark {landmark_id} not in system")
        return self.S[int(idx)]


@dataclass
class FeatureUncertainty:
    feature_id: int
    sigma_world: np.ndarray    # (3, 3) m^2
    sigma_pixel: np.ndarray    # (2, 2) px^2
    sigma_px: float            # sqrt(tr(sigma_pixel))
    residual_norm: float       # px
    kappa: float
    log_kappa: float
    depth_sensitivity: float   # m per px of disparity
    saturated: bool


def schur_complement(H: BlockHessian) -> SchurSystem:
    """Exact per-landmark marginal information of the damped system.

    For landmark i with damped block D_i and pose coupling B_i:
        A'   = (H_pp + lam I) - sum_j B_j D_j^-1 B_j^T
        G_i  = B_i^T (A' + B_i D_i^-1 B_i^T)^-1 B_i
             = G0_i - G0_i (D_i + G0_i)^-1 G0_i,   G0_i = B_i^T A'^-1 B_i
        S_i  = D_i - G_i
    which satisfies S_i^-1 == (H_damped^-1)_(i,i) exactly.

    Raises PoseBlockSingularError when the reduced pose system has no
    Cholesky factor (fully degenerate pose information).
    """
    lam = H.lambda_lm
    L = H.num_landmarks
    ids = np.asarray(H.landmark_ids)
    if L == 0:
        return SchurSystem(np.zeros((0, 3, 3)), ids, lam)
    D = np.ascontiguousarray(H.H_ll + lam * np.eye(3)[None, :, :])
    P = H.pose_dim
    if P == 0:
        S = 0.5 * (D + D.transpose(0, 2, 1))
        return SchurSystem(S, ids, lam)
    M, cond = _kernels.sym_inv3(D)
    if np.any(~np.isfinite(cond)):
        # a singular landmark block contributes nothing through Woodbury;
        # fall back to zero coupling removal for those blocks
        bad = ~np.isfinite(cond)
        M = M.copy()
        M[bad] = 0.0
    Bt = np.ascontiguousarray(H.Bt)
    A_red = H.H_pp + lam * np.eye(P) - _kernels.weighted_outer_sum(Bt, M)
    A_red = 0.5 * (A_red + A_red.T)
    try:
        c = cho_factor(A_red, lower=True)
    except np.linalg.LinAlgError as exc:
        raise PoseBlockSingularError(
            f"damped pose system not positive definite: {exc}")
    A_inv = cho_solve(c, np.eye(P))
    T = (Bt.reshape(3 * L, P) @ A_inv).reshape(L, 3, P)
    G0 = _kernels.row_gram3(np.ascontiguousarray(T), Bt)
    S = _kernels.marginal_from_gram(D, np.ascontiguousarray(G0))
    return SchurSystem(S, ids, lam)


def covariances_from_marginals(S: np.ndarray
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Invert marginal blocks; ill-conditioned ones get an eigenvalue
    pseudo-inverse and a saturation flag.

    Returns (covariances (n, 3, 3), saturated (n,) bool).
    """
    S = np.ascontiguousarray(S, dtype=np.float64)
    inv, cond = _kernels.sym_inv3(S)
    sat = ~np.isfinite(cond) | (cond > COND_LIMIT_COV)
    if np.any(sat):
        inv = inv.copy()
        for i in np.flatnonzero(sat):
            w, V = np.linalg.eigh(0.5 * (S[i] + S[i].T))
            cutoff = max(w[-1], 0.0) / COND_LIMIT_COV
            inv_w = np.where(w > cutoff, 1.0 / np.where(w > cutoff, w, 1.0),
                             0.0)
            inv[i] = (V * inv_w) @ V.T
    inv = 0.5 * (inv + inv.transpose(0, 2, 1))
    return inv, sat


def landmark_covariance(system: SchurSystem, landmark_id: int
                        ) -> tuple[np.ndarray, bool]:
    """World covariance of one landmark plus its saturation flag."""
    block = system.block(landmark_id)
    cov, sat = covariances_from_marginals(block[None, :, :])
    return cov[0], bool(sat[0])


def projection_jacobian(pose: Pose, landmark: np.ndarray,
                        intr: Intrinsics) -> np.ndarray:
    """2x3 derivative of the pixel projection wrt the world point."""
    p = pose.R @ landmark + pose.t
    if p[2] <= 0.0:
        raise BehindCameraError(f"depth {p[2]:.6g} <= 0")
    return stereo_world_jacobian(pose, landmark, intr)[:2, :]


def propagate_pixel_covariance(J: np.ndarray,
                               sigma_world: np.ndarray) -> np.ndarray:
    """First-order image-space covariance J Sigma J^T (symmetrized)."""
    out = J @ sigma_world @ J.T
    return 0.5 * (out + out.T)


def sigma_px_scalar(sigma_pixel: np.ndarray) -> float:
    """Scalar pixel uncertainty sqrt(tr(Sigma_pixel))."""
    return float(np.sqrt(max(np.trace(sigma_pixel), 0.0)))


def jacobian_condition(J: np.ndarray) -> tuple[float, float, bool]:
    """Condition number of a 2x3 Jacobian: (kappa, log kappa, saturated).

    Raises ZeroJacobianError on an identically zero input; near-rank-one
    Jacobians are capped at KAPPA_CAP and flagged.
    """
    J = np.ascontiguousarray(J, dtype=np.float64).reshape(1, 2, 3)
    if not np.any(J):
        raise ZeroJacobianError("zero projection Jacobian")
    smax, smin = _kernels.singular_values_2x3(J)
    smax, smin = float(smax[0]), float(smin[0])
    if smin < _KAPPA_EPS * smax:
        return KAPPA_CAP, float(np.log(KAPPA_CAP)), True
    kappa = min(smax / smin, KAPPA_CAP)
    return kappa, float(np.log(kappa)), False


def depth_sensitivity(depth: float, focal_px: float,
                      baseline_m: float) -> float:
    """Depth change per pixel of disparity: d^2 / (f b)."""
    if depth <= 0 or focal_px <= 0 or baseline_m <= 0:
        raise ValueError("depth, focal length and baseline must be > 0")
    return depth * depth / (focal_px * baseline_m)


@dataclass
class FeatureBatch:
    """Vectorized per-feature uncertainty quantities for one frame."""

    sigma_world: np.ndarray    # (n, 3, 3)
    sigma_pixel: np.ndarray    # (n, 2, 2)
    sigma_px: np.ndarray       # (n,)
    kappa: np.ndarray          # (n,)
    log_kappa: np.ndarray      # (n,)
    depth_sensitivity: np.ndarray  # (n,)
    saturated: np.ndarray      # (n,) bool


def feature_pass(sigma_world: np.ndarray, J: np.ndarray,
                 intr: Intrinsics | None = None) -> FeatureBatch:
    """Algorithm core for one frame: pixel spread and conditioning for
    every feature at once.

    ``sigma_world`` are per-feature world covariances aligned with the
    (n, 2, 3) pixel Jacobians ``J``. Depth sensitivity uses
    d = f / sigma_min, exact for the pinhole model; reported as 0 where
    intrinsics are not given.
    """
    sigma_world = np.ascontiguousarray(sigma_world, dtype=np.float64)
    J = np.ascontiguousarray(J, dtype=np.float64)
    n = len(J)
    eig = _kernels.sym_eigvals3(sigma_world)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(eig[:, 2] > 0.0,
                        eig[:, 0] / np.where(eig[:, 2] > 0.0, eig[:, 2],
                                             1.0),
                        np.inf)
    sat = ~np.isfinite(cond) | (cond > COND_LIMIT_COV) | (eig[:, 2] < 0.0)
    sigma_pixel = _kernels.pixel_covariance(J, sigma_world)
    tr = sigma_pixel[:, 0, 0] + sigma_pixel[:, 1, 1]
    sigma_px = np.sqrt(np.maximum(tr, 0.0))
    smax, smin = _kernels.singular_values_2x3(J)
    zero = smax <= 0.0
    degenerate = zero | (smin < _KAPPA_EPS * smax)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(degenerate, KAPPA_CAP,
                         smax / np.where(degenerate, 1.0, smin))
    kappa = np.minimum(kappa, KAPPA_CAP)
    log_kappa = np.log(kappa)
    sat = sat | degenerate
    dsens = np.zeros(n)
    if intr is not None:
        ok = smin > 0.0
        depth = np.where(ok, intr.focal_px / np.where(ok, smin, 1.0), 0.0)
        dsens = np.where(
            ok, depth * depth / (intr.focal_px * intr.baseline_m), 0.0)
    return FeatureBatch(sigma_world, sigma_pixel, sigma_px, kappa,
                        log_kappa, dsens, sat)
