import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mapanchor.errors import AngleNearPi, DegenerateConfiguration, EmptyIndex
from mapanchor.geometry import (
    NnIndex,
    PointCloud,
    Pose3,
    compose,
    exp_se3,
    log_se3,
    relative,
    se3_adjoint,
    se3_right_jacobian_inv,
    umeyama_align,
)


def random_pose(rng, trans_scale=5.0, max_angle=2.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    q = np.concatenate([np.sin(angle / 2) * axis, [np.cos(angle / 2)]])
    return Pose3(q, rng.uniform(-trans_scale, trans_scale, size=3))


def assert_pose_close(a: Pose3, b: Pose3, tol=1e-9):
    np.testing.assert_allclose(a.matrix(), b.matrix(), atol=tol)


def rz(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(0)
        T = random_pose(rng)
        assert_pose_close(compose(Pose3.identity(), T), T, tol=1e-12)
        assert_pose_close(compose(T, Pose3.identity()), T, tol=1e-12)

    def test_inverse_gives_identity(self):
        rng = np.random.default_rng(1)
        T = random_pose(rng)
        assert_pose_close(compose(T, T.inverse()), Pose3.identity(), tol=1e-12)
        assert_pose_close(compose(T.inverse(), T), Pose3.identity(), tol=1e-12)

    def test_matches_homogeneous_matrix_product(self):
        # oracle: 4x4 matrix product for Rz(90deg),(1,0,0) composed with I,(1,0,0)
        a = Pose3.from_rt(rz(np.pi / 2), [1.0, 0.0, 0.0])
        b = Pose3.from_rt(np.eye(3), [1.0, 0.0, 0.0])
        expected = a.matrix() @ b.matrix()
        got = compose(a, b)
        np.testing.assert_allclose(got.matrix(), expected, atol=1e-12)
        np.testing.assert_allclose(got.t, [1.0, 1.0, 0.0], atol=1e-12)

    def test_associativity_randomized(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = compose(compose(a, b), c)
            rhs = compose(a, compose(b, c))
            np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-12)

    def test_rotation_stays_orthonormal_over_long_chains(self):
        rng = np.random.default_rng(3)
        T = Pose3.identity()
        step = random_pose(rng, trans_scale=0.1, max_angle=0.3)
        for _ in range(10000):
            T = compose(T, step)
        R = T.rotation()
        assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-9
        assert np.linalg.det(R) > 0


class TestRelative:
    def test_self_is_identity(self):
        rng = np.random.default_rng(4)
        T = random_pose(rng)
        assert_pose_close(relative(T, T), Pose3.identity(), tol=1e-12)

    def test_relative_to_identity(self):
        rng = np.random.default_rng(5)
        T = random_pose(rng)
        assert_pose_close(relative(T, Pose3.identity()), T, tol=1e-12)

    def test_round_trip_law(self):
        # compose(b, relative(a, b)) == a for 1000 random pairs
        rng = np.random.default_rng(6)
        for _ in range(1000):
            a, b = random_pose(rng), random_pose(rng)
            assert_pose_close(compose(b, relative(a, b)), a, tol=1e-12)


class TestExpLog:
    def test_log_identity_is_zero(self):
        np.testing.assert_allclose(log_se3(Pose3.identity()), np.zeros(6), atol=1e-15)

    def test_exp_zero_is_identity(self):
        assert_pose_close(exp_se3(np.zeros(6)), Pose3.identity(), tol=1e-15)

    def test_exp_pure_z_rotation(self):
        T = exp_se3([0, 0, 0, 0, 0, np.pi / 2])
        np.testing.assert_allclose(T.rotation(), rz(np.pi / 2), atol=1e-12)
        np.testing.assert_allclose(T.t, np.zeros(3), atol=1e-12)

    def test_round_trip_random_small_twists(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            tw = np.concatenate(
                [rng.uniform(-2, 2, 3), rng.uniform(-1, 1, 3)]
            )
            np.testing.assert_allclose(log_se3(exp_se3(tw)), tw, atol=1e-9)

    def test_exp_log_round_trip_on_poses(self):
        rng = np.random.default_rng(8)
        for _ in range(500):
            T = random_pose(rng, max_angle=np.pi - 0.05)
            assert_pose_close(exp_se3(log_se3(T)), T, tol=1e-9)

    def test_log_rejects_angle_near_pi(self):
        T = exp_se3([0, 0, 0, 0, 0, np.pi - 1e-9])
        with pytest.raises(AngleNearPi):
            log_se3(T)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1.5, 1.5), min_size=6, max_size=6))
    def test_exp_log_round_trip_hypothesis(self, twist):
        tw = np.asarray(twist)
        if np.linalg.norm(tw[3:]) >= np.pi - 1e-3:
            return
        np.testing.assert_allclose(log_se3(exp_se3(tw)), tw, atol=1e-8)


class TestJacobians:
    def test_right_jacobian_inverse_matches_finite_differences(self):
        # d/d(delta) log(exp(xi) exp(delta)) at 0 == Jr_inv(xi)
        rng = np.random.default_rng(9)
        eps = 1e-6
        for _ in range(50):
            xi = np.concatenate([rng.uniform(-1, 1, 3), rng.uniform(-0.9, 0.9, 3)])
            base = exp_se3(xi)
            J_fd = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                plus = log_se3(compose(base, exp_se3(d)))
                minus = log_se3(compose(base, exp_se3(-d)))
                J_fd[:, k] = (plus - minus) / (2 * eps)
            J = se3_right_jacobian_inv(xi)
            np.testing.assert_allclose(J, J_fd, atol=1e-6)

    def test_adjoint_identity(self):
        # exp(Ad_T xi) == T exp(xi) T^-1
        rng = np.random.default_rng(10)
        for _ in range(50):
            T = random_pose(rng)
            xi = rng.uniform(-0.5, 0.5, 6)
            lhs = exp_se3(se3_adjoint(T) @ xi)
            rhs = compose(compose(T, exp_se3(xi)), T.inverse())
            np.testing.assert_allclose(lhs.matrix(), rhs.matrix(), atol=1e-9)


class TestUmeyama:
    def test_identity_when_equal(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(-3, 3, size=(20, 3))
        T, s = umeyama_align(pts, pts)
        assert_pose_close(T, Pose3.identity(), tol=1e-9)
        assert s == pytest.approx(1.0)

    def test_recovers_known_transform(self):
        rng = np.random.default_rng(12)
        for _ in range(25):
            pts = rng.uniform(-5, 5, size=(30, 3))
            true = random_pose(rng)
            T, _ = umeyama_align(pts, true.apply(pts))
            np.testing.assert_allclose(T.matrix(), true.matrix(), atol=1e-9)

    def test_recovers_known_similarity(self):
        rng = np.random.default_rng(13)
        pts = rng.uniform(-5, 5, size=(30, 3))
        true = random_pose(rng)
        scale = 1.7
        tgt = scale * (pts @ true.rotation().T) + true.t
        T, s = umeyama_align(pts, tgt, with_scale=True)
        assert s == pytest.approx(scale, abs=1e-9)
        np.testing.assert_allclose(T.rotation(), true.rotation(), atol=1e-9)
        np.testing.assert_allclose(T.t, true.t, atol=1e-8)

    def test_mirrored_set_still_proper_rotation(self):
        # reflection across x: SVD sign correction must keep det(R) = +1
        rng = np.random.default_rng(14)
        pts = rng.uniform(-2, 2, size=(40, 3))
        mirrored = pts * np.array([-1.0, 1.0, 1.0])
        T, _ = umeyama_align(pts, mirrored)
        assert np.linalg.det(T.rotation()) == pytest.approx(1.0, abs=1e-9)

    def test_degenerate_collinear(self):
        pts = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateConfiguration):
            umeyama_align(pts, pts + 1.0)

    def test_degenerate_too_few(self):
        with pytest.raises(DegenerateConfiguration):
            umeyama_align(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_recovered_transform_beats_random_perturbations(self):
        rng = np.random.default_rng(15)
        pts = rng.uniform(-5, 5, size=(50, 3))
        true = random_pose(rng)
        noisy_tgt = true.apply(pts) + rng.normal(0, 0.01, size=(50, 3))
        T, _ = umeyama_align(pts, noisy_tgt)

        def residual(P):
            return np.sum((P.apply(pts) - noisy_tgt) ** 2)

        best = residual(T)
        for _ in range(100):
            perturb = exp_se3(
                np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.01, 3)])
            )
            assert best <= residual(compose(perturb, T)) + 1e-12


class TestNnIndex:
    def test_single_point(self):
        idx = NnIndex(np.array([[1.0, 2.0, 3.0]]))
        d, i = idx.knn(np.zeros(3), k=1)
        assert i[0] == 0
        assert d[0] == pytest.approx(np.sqrt(14.0))

    def test_empty_raises(self):
        with pytest.raises(EmptyIndex):
            NnIndex(np.zeros((0, 3)))

    def test_knn_matches_brute_force_grid(self):
        rng = np.random.default_rng(16)
        pts = rng.uniform(0, 10, size=(1000, 3))
        idx = NnIndex(pts)
        q = rng.uniform(0, 10, size=3)
        d, i = idx.knn(q, k=5)
        brute = np.argsort(np.linalg.norm(pts - q, axis=1))[:5]
        assert set(i.tolist()) == set(brute.tolist())

    def test_radius_empty_when_smaller_than_spacing(self):
        xs = np.arange(10.0)
        pts = np.stack([xs, np.zeros(10), np.zeros(10)], axis=1)
        idx = NnIndex(pts)
        assert idx.radius(np.array([0.5, 0.0, 0.0]), 0.4).size == 0

    def test_matches_brute_force_on_random_configurations(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            n = rng.integers(1, 60)
            pts = rng.uniform(-1, 1, size=(n, 3))
            idx = NnIndex(pts)
            q = rng.uniform(-1, 1, size=3)
            k = int(rng.integers(1, n + 1))
            _, got = idx.knn(q, k)
            dists = np.linalg.norm(pts - q, axis=1)
            brute = set(np.argsort(dists, kind="stable")[:k].tolist())
            # compare as sets of distances to tolerate exact ties
            np.testing.assert_allclose(
                np.sort(dists[list(got)]), np.sort(dists[list(brute)]), atol=1e-12
            )
            r = float(rng.uniform(0.1, 1.0))
            got_r = set(idx.radius(q, r).tolist())
            assert got_r == set(np.nonzero(dists <= r)[0].tolist())


class TestPointCloud:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[np.nan, 0, 0]]))

    def test_transform(self):
        rng = np.random.default_rng(18)
        pts = rng.uniform(-1, 1, size=(10, 3))
        T = random_pose(rng)
        pc = PointCloud(pts).transformed(T)
        np.testing.assert_allclose(pc.xyz, (pts @ T.rotation().T) + T.t, atol=1e-12)
