# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels; mirrors _pykern function for function."""
import numpy as np

from libc.math cimport sqrt, acos, cos, log as c_log, INFINITY, NAN

cdef double TWO_PI_3 = 2.0943951023931953


cdef inline void _eig3(double a00, double a11, double a22,
                       double a01, double a02, double a12,
                       double *e0, double *e1, double *e2) nogil:
    cdef double q, p1, p2, p, b00, b11, b22, b01, b02, b12, detb, r, phi
    q = (a00 + a11 + a22) / 3.0
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    p2 = ((a00 - q) * (a00 - q) + (a11 - q) * (a11 - q)
          + (a22 - q) * (a22 - q) + 2.0 * p1)
    if p2 <= 0.0:
        e0[0] = q; e1[0] = q; e2[0] = q
        return
    p = sqrt(p2 / 6.0)
    b00 = (a00 - q) / p; b11 = (a11 - q) / p; b22 = (a22 - q) / p
    b01 = a01 / p; b02 = a02 / p; b12 = a12 / p
    detb = (b00 * (b11 * b22 - b12 * b12)
            - b01 * (b01 * b22 - b12 * b02)
            + b02 * (b01 * b12 - b11 * b02))
    r = detb / 2.0
    if r < -1.0:
        r = -1.0
    elif r > 1.0:
        r = 1.0
    phi = acos(r) / 3.0
    e0[0] = q + 2.0 * p * cos(phi)
    e2[0] = q + 2.0 * p * cos(phi + TWO_PI_3)
    e1[0] = 3.0 * q - e0[0] - e2[0]


def sym_eigvals3(double[:, :, ::1] blocks):
    cdef Py_ssize_t n = blocks.shape[0], i
    out_arr = np.empty((n, 3))
    cdef double[:, ::1] out = out_arr
    cdef double e0, e1, e2
    for i in range(n):
        _eig3(blocks[i, 0, 0], blocks[i, 1, 1], blocks[i, 2, 2],
              blocks[i, 0, 1], blocks[i, 0, 2], blocks[i, 1, 2],
              &e0, &e1, &e2)
        out[i, 0] = e0; out[i, 1] = e1; out[i, 2] = e2
    return out_arr


cdef inline double _inv3_sym(double a00, double a11, double a22,
                             double a01, double a02, double a12,
                             double *o) nogil:
    """Writes the adjugate inverse into o[0..8] row-major; returns det."""
    cdef double c00, c01, c02, c11, c12, c22, det
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    c11 = a00 * a22 - a02 * a02
    c12 = a01 * a02 - a00 * a12
    c22 = a00 * a11 - a01 * a01
    det = a00 * c00 + a01 * c01 + a02 * c02
    if det == 0.0:
        o[0] = o[1] = o[2] = o[3] = o[4] = o[5] = o[6] = o[7] = o[8] = 0.0
        return det
    o[0] = c00 / det; o[1] = c01 / det; o[2] = c02 / det
    o[3] = c01 / det; o[4] = c11 / det; o[5] = c12 / det
    o[6] = c02 / det; o[7] = c12 / det; o[8] = c22 / det
    return det


def sym_inv3(double[:, :, ::1] blocks):
    cdef Py_ssize_t n = blocks.shape[0], i
    inv_arr = np.empty((n, 3, 3))
    cond_arr = np.empty(n)
    cdef double[:, :, ::1] inv = inv_arr
    cdef double[::1] cond = cond_arr
    cdef double buf[9]
    cdef double det, e0, e1, e2
    for i in range(n):
        det = _inv3_sym(blocks[i, 0, 0], blocks[i, 1, 1], blocks[i, 2, 2],
                        blocks[i, 0, 1], blocks[i, 0, 2], blocks[i, 1, 2],
                        buf)
        inv[i, 0, 0] = buf[0]; inv[i, 0, 1] = buf[1]; inv[i, 0, 2] = buf[2]
        inv[i, 1, 0] = buf[3]; inv[i, 1, 1] = buf[4]; inv[i, 1, 2] = buf[5]
        inv[i, 2, 0] = buf[6]; inv[i, 2, 1] = buf[7]; inv[i, 2, 2] = buf[8]
        _eig3(blocks[i, 0, 0], blocks[i, 1, 1], blocks[i, 2, 2],
              blocks[i, 0, 1], blocks[i, 0, 2], blocks[i, 1, 2],
              &e0, &e1, &e2)
        if e2 > 0.0 and det != 0.0:
            cond[i] = e0 / e2
        else:
            cond[i] = INFINITY
    return inv_arr, cond_arr


def singular_values_2x3(double[:, :, ::1] J):
    cdef Py_ssize_t n = J.shape[0], i
    smax_arr = np.empty(n)
    smin_arr = np.empty(n)
    cdef double[::1] smax = smax_arr
    cdef double[::1] smin = smin_arr
    cdef double g00, g11, g01, mean, rad, hi, lo
    for i in range(n):
        g00 = (J[i, 0, 0] * J[i, 0, 0] + J[i, 0, 1] * J[i, 0, 1]
               + J[i, 0, 2] * J[i, 0, 2])
        g11 = (J[i, 1, 0] * J[i, 1, 0] + J[i, 1, 1] * J[i, 1, 1]
               + J[i, 1, 2] * J[i, 1, 2])
        g01 = (J[i, 0, 0] * J[i, 1, 0] + J[i, 0, 1] * J[i, 1, 1]
               + J[i, 0, 2] * J[i, 1, 2])
        mean = 0.5 * (g00 + g11)
        rad = (0.5 * (g00 - g11)) * (0.5 * (g00 - g11)) + g01 * g01
        rad = sqrt(rad) if rad > 0.0 else 0.0
        hi = mean + rad
        lo = mean - rad
        smax[i] = sqrt(hi) if hi > 0.0 else 0.0
        smin[i] = sqrt(lo) if lo > 0.0 else 0.0
    return smax_arr, smin_arr


def pixel_covariance(double[:, :, ::1] J, double[:, :, ::1] S):
    cdef Py_ssize_t n = J.shape[0], i, a, b, k, l
    out_arr = np.empty((n, 2, 2))
    cdef double[:, :, ::1] out = out_arr
    cdef double acc00, acc01, acc11
    cdef double js[2][3]
    for i in range(n):
        for a in range(2):
            for k in range(3):
                js[a][k] = (J[i, a, 0] * S[i, 0, k]
                            + J[i, a, 1] * S[i, 1, k]
                            + J[i, a, 2] * S[i, 2, k])
        acc00 = js[0][0] * J[i, 0, 0] + js[0][1] * J[i, 0, 1] + js[0][2] * J[i, 0, 2]
        acc01 = 0.5 * ((js[0][0] * J[i, 1, 0] + js[0][1] * J[i, 1, 1] + js[0][2] * J[i, 1, 2])
                       + (js[1][0] * J[i, 0, 0] + js[1][1] * J[i, 0, 1] + js[1][2] * J[i, 0, 2]))
        acc11 = js[1][0] * J[i, 1, 0] + js[1][1] * J[i, 1, 1] + js[1][2] * J[i, 1, 2]
        out[i, 0, 0] = acc00
        out[i, 0, 1] = acc01
        out[i, 1, 0] = acc01
        out[i, 1, 1] = acc11
    return out_arr


def row_gram3(double[:, :, ::1] X, double[:, :, ::1] Y):
    """Batched X_i Y_i^T for (n, 3, p) stacks; returns (n, 3, 3)."""
    cdef Py_ssize_t n = X.shape[0], p = X.shape[2], i, j
    out_arr = np.zeros((n, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double s00, s01, s02, s10, s11, s12, s20, s21, s22
    cdef double x0, x1, x2, y0, y1, y2
    for i in range(n):
        s00 = s01 = s02 = s10 = s11 = s12 = s20 = s21 = s22 = 0.0
        for j in range(p):
            x0 = X[i, 0, j]; x1 = X[i, 1, j]; x2 = X[i, 2, j]
            y0 = Y[i, 0, j]; y1 = Y[i, 1, j]; y2 = Y[i, 2, j]
            s00 += x0 * y0; s01 += x0 * y1; s02 += x0 * y2
            s10 += x1 * y0; s11 += x1 * y1; s12 += x1 * y2
            s20 += x2 * y0; s21 += x2 * y1; s22 += x2 * y2
        out[i, 0, 0] = s00; out[i, 0, 1] = s01; out[i, 0, 2] = s02
        out[i, 1, 0] = s10; out[i, 1, 1] = s11; out[i, 1, 2] = s12
        out[i, 2, 0] = s20; out[i, 2, 1] = s21; out[i, 2, 2] = s22
    return out_arr


def frame_stats(double[:, :, ::1] sigma_world, double[:, :, ::1] J,
                double[:, ::1] residuals, double cond_limit,
                double kappa_cap, double kappa_eps, double outlier_gate):
    """One-pass frame aggregates; mirrors _pykern.frame_stats."""
    cdef Py_ssize_t n = sigma_world.shape[0], i, a, k
    cdef double js[2][3]
    cdef double e0, e1, e2, cond
    cdef double tr, g00, g11, g01, mean, rad, hi, lo, smax, smin
    cdef double kappa, rn
    cdef double sum_sigma = 0.0, sum_res = 0.0, sum_logk = 0.0
    cdef Py_ssize_t n_out = 0, n_sat = 0
    cdef bint cov_bad, degen
    cdef double sigma_i
    for i in range(n):
        _eig3(sigma_world[i, 0, 0], sigma_world[i, 1, 1],
              sigma_world[i, 2, 2], sigma_world[i, 0, 1],
              sigma_world[i, 0, 2], sigma_world[i, 1, 2], &e0, &e1, &e2)
        cond = (e0 / e2) if e2 > 0.0 else INFINITY
        cov_bad = (cond != cond) or cond > cond_limit or e2 < 0.0
        if cov_bad:
            sigma_i = NAN
        else:
            for a in range(2):
                for k in range(3):
                    js[a][k] = (J[i, a, 0] * sigma_world[i, 0, k]
                                + J[i, a, 1] * sigma_world[i, 1, k]
                                + J[i, a, 2] * sigma_world[i, 2, k])
            tr = (js[0][0] * J[i, 0, 0] + js[0][1] * J[i, 0, 1]
                  + js[0][2] * J[i, 0, 2]
                  + js[1][0] * J[i, 1, 0] + js[1][1] * J[i, 1, 1]
                  + js[1][2] * J[i, 1, 2])
            sigma_i = sqrt(tr) if tr > 0.0 else 0.0
        sum_sigma += sigma_i

        g00 = (J[i, 0, 0] * J[i, 0, 0] + J[i, 0, 1] * J[i, 0, 1]
               + J[i, 0, 2] * J[i, 0, 2])
        g11 = (J[i, 1, 0] * J[i, 1, 0] + J[i, 1, 1] * J[i, 1, 1]
               + J[i, 1, 2] * J[i, 1, 2])
        g01 = (J[i, 0, 0] * J[i, 1, 0] + J[i, 0, 1] * J[i, 1, 1]
               + J[i, 0, 2] * J[i, 1, 2])
        mean = 0.5 * (g00 + g11)
        rad = (0.5 * (g00 - g11)) * (0.5 * (g00 - g11)) + g01 * g01
        rad = sqrt(rad) if rad > 0.0 else 0.0
        hi = mean + rad
        lo = mean - rad
        smax = sqrt(hi) if hi > 0.0 else 0.0
        smin = sqrt(lo) if lo > 0.0 else 0.0
        degen = (smax <= 0.0) or (smin < kappa_eps * smax)
        if degen:
            kappa = kappa_cap
        else:
            kappa = smax / smin
            if kappa > kappa_cap:
                kappa = kappa_cap
        sum_logk += c_log(kappa)
        if cov_bad or degen:
            n_sat += 1

        rn = sqrt(residuals[i, 0] * residuals[i, 0]
                  + residuals[i, 1] * residuals[i, 1])
        sum_res += rn
        if rn > outlier_gate:
            n_out += 1
    return (sum_sigma / n, sum_res / n, sum_logk / n,
            (<double>n_out) / n, n_sat)


def sym_gram_scaled(double[:, :, :] Z, double[:, :, ::1] M, double scale):
    """scale * (M_i + Z_i Z_i^T); Z may be any-strided, output symmetric."""
    cdef Py_ssize_t n = Z.shape[0], p = Z.shape[2], i, j
    out_arr = np.empty((n, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double s00, s01, s02, s11, s12, s22
    cdef double z0, z1, z2
    for i in range(n):
        s00 = s01 = s02 = s11 = s12 = s22 = 0.0
        for j in range(p):
            z0 = Z[i, 0, j]; z1 = Z[i, 1, j]; z2 = Z[i, 2, j]
            s00 += z0 * z0; s01 += z0 * z1; s02 += z0 * z2
            s11 += z1 * z1; s12 += z1 * z2; s22 += z2 * z2
        out[i, 0, 0] = scale * (M[i, 0, 0] + s00)
        out[i, 1, 1] = scale * (M[i, 1, 1] + s11)
        out[i, 2, 2] = scale * (M[i, 2, 2] + s22)
        out[i, 0, 1] = out[i, 1, 0] = scale * (
            0.5 * (M[i, 0, 1] + M[i, 1, 0]) + s01)
        out[i, 0, 2] = out[i, 2, 0] = scale * (
            0.5 * (M[i, 0, 2] + M[i, 2, 0]) + s02)
        out[i, 1, 2] = out[i, 2, 1] = scale * (
            0.5 * (M[i, 1, 2] + M[i, 2, 1]) + s12)
    return out_arr


def marginal_from_gram(double[:, :, ::1] D, double[:, :, ::1] G):
    cdef Py_ssize_t n = D.shape[0], i, a, b, k
    out_arr = np.empty((n, 3, 3))
    cdef double[:, :, ::1] out = out_arr
    cdef double kbuf[9]
    cdef double gk[3][3]
    cdef double acc, det
    for i in range(n):
        det = _inv3_sym(D[i, 0, 0] + G[i, 0, 0],
                        D[i, 1, 1] + G[i, 1, 1],
                        D[i, 2, 2] + G[i, 2, 2],
                        0.5 * (D[i, 0, 1] + D[i, 1, 0] + G[i, 0, 1] + G[i, 1, 0]),
                        0.5 * (D[i, 0, 2] + D[i, 2, 0] + G[i, 0, 2] + G[i, 2, 0]),
                        0.5 * (D[i, 1, 2] + D[i, 2, 1] + G[i, 1, 2] + G[i, 2, 1]),
                        kbuf)
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += G[i, a, k] * kbuf[3 * k + b]
                gk[a][b] = acc
        for a in range(3):
            for b in range(3):
                acc = 0.0
                for k in range(3):
                    acc += gk[a][k] * G[i, k, b]
                out[i, a, b] = D[i, a, b] - G[i, a, b] + acc
        # symmetrize in place
        for a in range(3):
            for b in range(a + 1, 3):
                acc = 0.5 * (out[i, a, b] + out[i, b, a])
                out[i, a, b] = acc
                out[i, b, a] = acc
    return out_arr
