"""Numpy fallback implementations of the per-feature hot kernels.

All functions take C-contiguous float64 arrays batched over the leading
axis. The compiled extension (_fastkern) mirrors this module exactly;
tests assert parity between the two.
"""
import numpy as np

_TWO_PI_3 = 2.0 * np.pi / 3.0


def sym_eigvals3(blocks: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 blocks, descending; closed form.

    Trigonometric method; exact enough for conditioning decisions, not a
    substitute for LAPACK on nearly defective inputs.
    """
    a = np.asarray(blocks, dtype=np.float64)
    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    q = (a00 + a11 + a22) / 3.0
    p1 = a01 ** 2 + a02 ** 2 + a12 ** 2
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    out = np.empty((a.shape[0], 3))
    near_iso = p <= 0.0
    safe_p = np.where(near_iso, 1.0, p)
    b00 = (a00 - q) / safe_p
    b11 = (a11 - q) / safe_p
    b22 = (a22 - q) / safe_p
    b01 = a01 / safe_p
    b02 = a02 / safe_p
    b12 = a12 / safe_p
    detb = (b00 * (b11 * b22 - b12 ** 2)
            - b01 * (b01 * b22 - b12 * b02)
            + b02 * (b01 * b12 - b11 * b02))
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e0 = q + 2.0 * p * np.cos(phi)
    e2 = q + 2.0 * p * np.cos(phi + _TWO_PI_3)
    e1 = 3.0 * q - e0 - e2
    out[:, 0] = np.where(near_iso, q, e0)
    out[:, 1] = np.where(near_iso, q, e1)
    out[:, 2] = np.where(near_iso, q, e2)
    return out


def sym_inv3(blocks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjugate inverses and condition numbers of symmetric 3x3 blocks.

    Returns (inverses, conds). Where a block is singular or indefinite the
    condition is +inf and the corresponding inverse is unusable; callers
    must branch on cond before trusting it.
    """
    a = np.asarray(blocks, dtype=np.float64)
    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    bad = det == 0.0
    safe_det = np.where(bad, 1.0, det)
    inv = np.empty_like(a)
    inv[:, 0, 0] = c00 / safe_det
    inv[:, 0, 1] = inv[:, 1, 0] = c01 / safe_det
    inv[:, 0, 2] = inv[:, 2, 0] = c02 / safe_det
    inv[:, 1, 1] = c11 / safe_det
    inv[:, 1, 2] = inv[:, 2, 1] = c12 / safe_det
    inv[:, 2, 2] = c22 / safe_det
    eig = sym_eigvals3(a)
    lo = eig[:, 2]
    hi = eig[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where((lo > 0.0) & ~bad, hi / np.where(lo > 0, lo, 1.0),
                        np.inf)
    return inv, cond


def singular_values_2x3(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(sigma_max, sigma_min) of 2x3 blocks via the 2x2 Gram matrix."""
    J = np.asarray(J, dtype=np.float64)
    g00 = np.einsum("ni,ni->n", J[:, 0, :], J[:, 0, :])
    g11 = np.einsum("ni,ni->n", J[:, 1, :], J[:, 1, :])
    g01 = np.einsum("ni,ni->n", J[:, 0, :], J[:, 1, :])
    mean = 0.5 * (g00 + g11)
    rad = np.sqrt(np.maximum((0.5 * (g00 - g11)) ** 2 + g01 ** 2, 0.0))
    hi = np.maximum(mean + rad, 0.0)
    lo = np.maximum(mean - rad, 0.0)
    return np.sqrt(hi), np.sqrt(lo)


def pixel_covariance(J: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Symmetrized J S J^T for 2x3 Jacobians and 3x3 covariances."""
    out = np.einsum("nij,njk,nlk->nil", J, S, J)
    return 0.5 * (out + out.transpose(0, 2, 1))


def row_gram3(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Batched X_i Y_i^T for (n, 3, p) stacks; returns (n, 3, 3)."""
    return X @ Y.transpose(0, 2, 1)


def sym_gram_scaled(Z: np.ndarray, M: np.ndarray,
                    scale: float) -> np.ndarray:
    """scale * (M_i + Z_i Z_i^T) with exactly symmetric output."""
    G = Z @ Z.transpose(0, 2, 1)
    out = scale * (M + 0.5 * (G + G.transpose(0, 2, 1)))
    return 0.5 * (out + out.transpose(0, 2, 1))


def weighted_outer_sum(Bt: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Sum_i Bt_i^T M_i Bt_i for (n, 3, p) Bt and (n, 3, 3) M; (p, p)."""
    W = M @ Bt                                   # (n, 3, p)
    return np.tensordot(Bt, W, axes=([0, 1], [0, 1]))


def marginal_from_gram(D: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Per-landmark marginal information S_i = D_i - G_i + G_i K_i G_i.

    K_i = (D_i + G_i)^-1; D are the damped landmark blocks and G the
    pose-coupling Gram blocks computed against the fully reduced pose
    system (the landmark's own contribution added back).
    """
    K, _ = sym_inv3(D + G)
    corr = np.einsum("nab,nbc,ncd->nad", G, K, G)
    S = D - G + corr
    return 0.5 * (S + S.transpose(0, 2, 1))


def frame_stats(sigma_world: np.ndarray, J: np.ndarray,
                residuals: np.ndarray, cond_limit: float, kappa_cap: float,
                kappa_eps: float, outlier_gate: float
                ) -> tuple[float, float, float, float, int]:
    """One-pass frame aggregates from world covariances and residuals.

    Returns (sigma_bar, residual_bar, kappa_bar, outlier_ratio, n_sat).
    Covariance blocks that are indefinite or conditioned beyond the limit
    poison sigma_bar with NaN; the caller treats any saturation as a
    degenerate frame.
    """
    n = len(J)
    eig = sym_eigvals3(sigma_world)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(eig[:, 2] > 0.0,
                        eig[:, 0] / np.where(eig[:, 2] > 0.0, eig[:, 2],
                                             1.0),
                        np.inf)
    cov_bad = ~np.isfinite(cond) | (cond > cond_limit) | (eig[:, 2] < 0.0)
    pix = pixel_covariance(J, sigma_world)
    tr = pix[:, 0, 0] + pix[:, 1, 1]
    sigma_px = np.sqrt(np.maximum(tr, 0.0))
    sigma_px = np.where(cov_bad, np.nan, sigma_px)
    smax, smin = singular_values_2x3(J)
    degenerate = (smax <= 0.0) | (smin < kappa_eps * smax)
    with np.errstate(divide="ignore", invalid="ignore"):
        kappa = np.where(degenerate, kappa_cap,
                         smax / np.where(degenerate, 1.0, smin))
    log_kappa = np.log(np.minimum(kappa, kappa_cap))
    res_norm = np.sqrt(residuals[:, 0] ** 2 + residuals[:, 1] ** 2)
    n_sat = int(np.count_nonzero(cov_bad | degenerate))
    return (float(sigma_px.mean()),
            float(res_norm.mean()),
            float(log_kappa.mean()),
            float(np.count_nonzero(res_norm > outlier_gate) / n),
            n_sat)
