"""Marginalization, covariance propagation, conditioning."""
import numpy as np
import pytest

from vorisk.backend import BlockHessian
from vorisk.errors import BehindCameraError, ZeroJacobianError
from vorisk.geometry import Intrinsics, Pose, project_stereo, so3_exp
from vorisk.uncertainty import (SchurSystem, covariances_from_marginals,
                                depth_sensitivity, feature_pass,
                                jacobian_condition, landmark_covariance,
                                projection_jacobian,
                                propagate_pixel_covariance,
                                schur_complement, sigma_px_scalar)

INTR = Intrinsics(focal_px=500.0, cu=320.0, cv=240.0, baseline_m=0.2,
                  width=640, height=480)


def random_block_system(rng, n_poses, n_landmarks, lam=0.0):
    """Random SPD block system shaped like a BA normal matrix."""
    P = 6 * n_poses
    A = rng.normal(size=(P, P))
    H_pp = A @ A.T + (P + 1.0) * np.eye(P)
    Bt = rng.normal(size=(n_landmarks, 3, P))
    # make each landmark block dominate its coupling so H is SPD
    H_ll = np.zeros((n_landmarks, 3, 3))
    Hinv = np.linalg.inv(H_pp)
    for i in range(n_landmarks):
        C = rng.normal(size=(3, 3))
        couple = Bt[i] @ Hinv @ Bt[i].T
        H_ll[i] = C @ C.T + couple + \
            (1.0 + rng.uniform(0.5, 3.0)) * np.eye(3) \
            + np.linalg.eigvalsh(couple)[-1] * np.eye(3)
    H = BlockHessian(H_pp, np.ascontiguousarray(Bt),
                     np.ascontiguousarray(H_ll), lam,
                     np.arange(n_landmarks, dtype=np.int64))
    # sanity: the dense matrix must be SPD
    assert np.linalg.eigvalsh(H.dense(damped=True))[0] > 0
    return H


class TestSchurComplement:
    def test_zero_coupling_returns_landmark_blocks(self):
        rng = np.random.default_rng(0)
        H = random_block_system(rng, 2, 4)
        H.Bt[:] = 0.0
        out = schur_complement(H)
        assert np.allclose(out.S, H.H_ll, rtol=1e-12)

    def test_hand_example_single_landmark(self):
        # H_pp = 2 I6, coupling all ones, H_ll = 10 I3
        # -> S = 10 I3 - 3 * ones(3,3)
        H = BlockHessian(
            H_pp=2.0 * np.eye(6),
            Bt=np.ones((1, 3, 6)),
            H_ll=10.0 * np.eye(3)[None, :, :].copy(),
            lambda_lm=0.0,
            landmark_ids=np.array([0]),
        )
        out = schur_complement(H)
        expected = 10.0 * np.eye(3) - 3.0 * np.ones((3, 3))
        assert np.allclose(out.S[0], expected, atol=1e-12)

    def test_marginals_match_dense_inverse(self):
        # the central correctness check: S_ii^-1 equals the landmark-i
        # diagonal block of the dense inverse
        rng = np.random.default_rng(1)
        H = random_block_system(rng, 5, 20)
        out = schur_complement(H)
        dense_inv = np.linalg.inv(H.dense(damped=True))
        P = H.pose_dim
        for i in range(H.num_landmarks):
            blk = dense_inv[P + 3 * i:P + 3 * i + 3,
                            P + 3 * i:P + 3 * i + 3]
            S_inv = np.linalg.inv(out.S[i])
            err = np.linalg.norm(S_inv - blk) / np.linalg.norm(blk)
            assert err <= 1e-8

    def test_damping_included(self):
        rng = np.random.default_rng(2)
        H = random_block_system(rng, 3, 6, lam=0.37)
        out = schur_complement(H)
        dense_inv = np.linalg.inv(H.dense(damped=True))
        P = H.pose_dim
        blk = dense_inv[P:P + 3, P:P + 3]
        assert np.allclose(np.linalg.inv(out.S[0]), blk, rtol=1e-9)

    def test_marginal_dominates_conditional(self):
        # S_ii^-1 >= H_ll,ii^-1 in the PSD order
        rng = np.random.default_rng(3)
        H = random_block_system(rng, 4, 12)
        out = schur_complement(H)
        for i in range(H.num_landmarks):
            marginal = np.linalg.inv(out.S[i])
            conditional = np.linalg.inv(H.H_ll[i])
            w = np.linalg.eigvalsh(marginal - conditional)
            assert w[0] >= -1e-10

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        H = random_block_system(rng, 3, 8)
        a = schur_complement(H).S
        b = schur_complement(H).S
        assert np.array_equal(a, b)


class TestLandmarkCovariance:
    def test_scalar_block(self):
        system = SchurSystem(S=(4.0 * np.eye(3))[None, :, :].copy(),
                             landmark_ids=np.array([5]), lambda_lm=0.0)
        cov, sat = landmark_covariance(system, 5)
        assert np.allclose(cov, 0.25 * np.eye(3), atol=1e-14)
        assert not sat

    def test_rank_deficient_saturates(self):
        system = SchurSystem(
            S=np.diag([1.0, 1.0, 1e-14])[None, :, :].copy(),
            landmark_ids=np.array([0]), lambda_lm=0.0)
        cov, sat = landmark_covariance(system, 0)
        assert sat
        # pseudo-inverse: well-observed directions inverted, dead one zeroed
        assert np.allclose(cov[:2, :2], np.eye(2), rtol=1e-9)
        assert abs(cov[2, 2]) < 1e-6

    def test_inverse_identity(self):
        rng = np.random.default_rng(5)
        A = rng.normal(size=(3, 3))
        S = A @ A.T + 2.0 * np.eye(3)
        system = SchurSystem(S=S[None, :, :].copy(),
                             landmark_ids=np.array([0]), lambda_lm=0.0)
        cov, sat = landmark_covariance(system, 0)
        assert not sat
        assert np.linalg.norm(cov @ S - np.eye(3)) < 1e-10

    def test_unknown_landmark_raises(self):
        system = SchurSystem(S=np.eye(3)[None, :, :].copy(),
                             landmark_ids=np.array([3]), lambda_lm=0.0)
        with pytest.raises(KeyError):
            system.block(4)


class TestProjectionJacobian:
    def test_identity_pose_unit_focal(self):
        pose = Pose(np.eye(3), np.zeros(3))
        intr = Intrinsics(1.0, 0.0, 0.0, 1.0, 100, 100)
        J = projection_jacobian(pose, np.array([0.0, 0.0, 1.0]), intr)
        assert np.allclose(J, [[1, 0, 0], [0, 1, 0]], atol=1e-14)

    def test_linear_in_focal_length(self):
        pose = Pose(np.eye(3), np.zeros(3))
        x = np.array([0.3, -0.2, 4.0])
        i1 = Intrinsics(100.0, 0, 0, 0.1, 640, 480)
        i2 = Intrinsics(300.0, 0, 0, 0.1, 640, 480)
        J1 = projection_jacobian(pose, x, i1)
        J2 = projection_jacobian(pose, x, i2)
        assert np.allclose(J2, 3.0 * J1, rtol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        step = 1e-6
        for _ in range(200):
            pose = Pose(so3_exp(rng.normal(scale=0.4, size=3)),
                        rng.normal(scale=0.3, size=3))
            x = pose.R.T @ (np.array([rng.uniform(-1, 1),
                                      rng.uniform(-1, 1),
                                      rng.uniform(2, 8)]) - pose.t)
            J = projection_jacobian(pose, x, INTR)
            J_fd = np.zeros((2, 3))
            for k in range(3):
                dx = np.zeros(3)
                dx[k] = step
                J_fd[:, k] = (project_stereo(pose, x + dx, INTR)[:2]
                              - project_stereo(pose, x - dx, INTR)[:2]) \
                    / (2 * step)
            denom = max(np.abs(J_fd).max(), 1.0)
            assert np.abs(J - J_fd).max() / denom <= 1e-5

    def test_behind_camera(self):
        pose = Pose(np.eye(3), np.zeros(3))
        with pytest.raises(BehindCameraError):
            projection_jacobian(pose, np.array([0.0, 0.0, -2.0]), INTR)


class TestPropagation:
    def test_isotropic_projection(self):
        J = np.array([[1.0, 0, 0], [0, 1.0, 0]])
        sigma = 0.09 * np.eye(3)
        out = propagate_pixel_covariance(J, sigma)
        assert np.allclose(out, 0.09 * np.eye(2), atol=1e-14)
        assert np.isclose(sigma_px_scalar(out), 0.3 * np.sqrt(2.0))

    def test_zero_covariance(self):
        J = np.array([[2.0, 1.0, 0.5], [0, 1.0, -1.0]])
        out = propagate_pixel_covariance(J, np.zeros((3, 3)))
        assert np.allclose(out, 0.0, atol=1e-30)

    def test_monte_carlo_trace(self):
        # trace matches empirical covariance of J @ delta over 1e5 samples
        rng = np.random.default_rng(7)
        A = rng.normal(size=(3, 3))
        sigma_world = A @ A.T + 0.5 * np.eye(3)
        J = rng.normal(size=(2, 3))
        out = propagate_pixel_covariance(J, sigma_world)
        delta = rng.multivariate_normal(np.zeros(3), sigma_world,
                                        size=100_000)
        pix = delta @ J.T
        emp = np.cov(pix.T)
        assert abs(np.trace(out) - np.trace(emp)) / np.trace(emp) < 0.03

    def test_psd_preserved(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            A = rng.normal(size=(3, 3))
            sigma = A @ A.T
            J = rng.normal(size=(2, 3))
            out = propagate_pixel_covariance(J, sigma)
            w = np.linalg.eigvalsh(out)
            assert w[0] >= -1e-12 * max(np.trace(out), 1e-30)


class TestJacobianCondition:
    def test_orthonormal_rows(self):
        kappa, logk, sat = jacobian_condition(
            np.array([[1.0, 0, 0], [0, 1.0, 0]]))
        assert np.isclose(kappa, 1.0)
        assert np.isclose(logk, 0.0)
        assert not sat

    def test_direct_svd_example(self):
        kappa, logk, sat = jacobian_condition(
            np.array([[2.0, 0, 0], [0, 1.0, 0]]))
        assert np.isclose(kappa, 2.0)
        assert np.isclose(logk, np.log(2.0))

    def test_scale_invariance(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            J = rng.normal(size=(2, 3))
            k1, _, _ = jacobian_condition(J)
            c = rng.uniform(0.1, 10.0) * rng.choice([-1.0, 1.0])
            k2, _, _ = jacobian_condition(c * J)
            assert np.isclose(k1, k2, rtol=1e-9)

    def test_zero_jacobian_raises(self):
        with pytest.raises(ZeroJacobianError):
            jacobian_condition(np.zeros((2, 3)))

    def test_rank_one_saturates(self):
        kappa, logk, sat = jacobian_condition(
            np.array([[1.0, 0, 0], [2.0, 0, 0]]))
        assert sat
        assert kappa == 1e12


class TestDepthSensitivity:
    def test_unit_case(self):
        assert depth_sensitivity(1.0, 1.0, 1.0) == 1.0

    def test_quadratic_in_depth(self):
        assert np.isclose(depth_sensitivity(2.0, 1.0, 1.0),
                          4.0 * depth_sensitivity(1.0, 1.0, 1.0))

    def test_formula_evaluation(self):
        # f = 100, b = 0.1, d = 2 -> 0.4 m/px
        assert np.isclose(depth_sensitivity(2.0, 100.0, 0.1), 0.4)

    def test_monotone_in_depth(self):
        vals = [depth_sensitivity(d, 500.0, 0.1)
                for d in np.linspace(0.5, 30.0, 40)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            depth_sensitivity(0.0, 1.0, 1.0)


def test_kappa_monotone_under_baseline_shrink():
    """Median kappa never decreases as the stereo baseline shrinks."""
    rng = np.random.default_rng(10)
    landmarks = rng.uniform(-2, 2, size=(100, 3)) + [0, 0, 6.0]
    medians = []
    for spread in (2.0, 1.0, 0.5, 0.1):
        pose = Pose(np.eye(3), np.zeros(3))
        kappas = []
        for x in landmarks:
            # grazing geometry proxy: features drift toward the image edge
            # as the effective triangulation baseline shrinks
            xs = x + np.array([6.0 / spread, 0.0, 0.0])
            k, _, _ = jacobian_condition(
                projection_jacobian(pose, xs, INTR))
            kappas.append(k)
        medians.append(np.median(kappas))
    assert all(b >= a for a, b in zip(medians, medians[1:]))


def test_feature_pass_matches_single_ops():
    rng = np.random.default_rng(11)
    n = 40
    A = rng.normal(size=(n, 3, 3))
    sigma_world = A @ A.transpose(0, 2, 1) + 0.3 * np.eye(3)
    J = rng.normal(size=(n, 2, 3))
    batch = feature_pass(sigma_world, J, INTR)
    for i in range(n):
        pix = propagate_pixel_covariance(J[i], sigma_world[i])
        assert np.allclose(batch.sigma_pixel[i], pix, rtol=1e-10)
        assert np.isclose(batch.sigma_px[i], sigma_px_scalar(pix),
                          rtol=1e-10)
        k, logk, _ = jacobian_condition(J[i])
        assert np.isclose(batch.kappa[i], k, rtol=1e-9)
        assert np.isclose(batch.log_kappa[i], logk, rtol=1e-9)


def test_covariances_from_marginals_identity():
    rng = np.random.default_rng(12)
    A = rng.normal(size=(20, 3, 3))
    S = A @ A.transpose(0, 2, 1) + 1.0 * np.eye(3)
    cov, sat = covariances_from_marginals(S)
    assert not sat.any()
    assert np.allclose(cov @ S, np.eye(3)[None], atol=1e-9)
