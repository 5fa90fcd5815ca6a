import numpy as np
import pytest
from worlds import pose_rz, room_scan_cloud

from mapanchor.errors import NoPointsInExclusionZone, TooFewPoints
from mapanchor.geometry import NnIndex, PointCloud, Pose3, compose, log_se3, relative
from mapanchor.registration import (
    AlignmentClass,
    RegistrationParams,
    RegistrationResult,
    classify_alignment,
    compute_fitness,
    group_keyframes,
    inlier_fraction,
    p2p_icp,
    point_covariances,
    rot_z,
    sphere_crop_targets,
    yaw_gicp,
)

PARAMS = RegistrationParams()


@pytest.fixture(scope="module")
def room():
    return room_scan_cloud()


class TestYawGicp:
    def test_identity_on_identical_clouds(self, room):
        res = yaw_gicp(room, room, 0.0, PARAMS)
        assert res.converged
        assert res.fitness_f1 == 1.0
        assert res.fitness_f2 == 1.0
        assert np.linalg.norm(res.transform.t) < 1e-6
        assert res.transform.rotation_angle() < 1e-6

    def test_recovers_yaw_and_translation(self, room):
        true = pose_rz(np.radians(10.0), [0.2, 0.1, 0.05])
        target = true.apply(room)
        res = yaw_gicp(room, target, initial_yaw=np.radians(4.0), params=PARAMS)
        assert res.converged
        err = relative(res.transform, true)
        assert np.linalg.norm(err.t) < 1e-3
        assert np.degrees(err.rotation_angle()) < 0.05

    def test_pitch_roll_exactly_zero(self, room):
        true = pose_rz(np.radians(-8.0), [0.3, -0.2, 0.1])
        res = yaw_gicp(room, true.apply(room), initial_yaw=0.0, params=PARAMS)
        tw = log_se3(res.transform)
        assert tw[3] == 0.0
        assert tw[4] == 0.0

    def test_degenerate_pitched_target_never_confident(self, room):
        # 90-degree pitch cannot be represented by yaw+translation
        pitched = Pose3.from_rt(
            np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]]), [0.0, 0.0, 0.0]
        )
        res = yaw_gicp(room, pitched.apply(room), initial_yaw=0.0, params=PARAMS)
        assert (not res.converged) or res.fitness_f2 < 0.5

    def test_too_few_points(self):
        with pytest.raises(TooFewPoints):
            yaw_gicp(np.zeros((3, 3)), np.zeros((100, 3)), 0.0, PARAMS)

    def test_cost_non_increasing_per_iteration(self, room):
        true = pose_rz(np.radians(15.0), [0.3, 0.2, 0.0])
        res = yaw_gicp(room, true.apply(room), initial_yaw=np.radians(5.0), params=PARAMS)
        assert res.iteration_costs
        for pre, post in res.iteration_costs:
            assert post <= pre + 1e-9

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        from mapanchor.registration import _yaw_jacobian

        for _ in range(100):
            s = rng.uniform(-5, 5, size=(1, 3))
            theta = rng.uniform(-1, 1)
            t = rng.uniform(-1, 1, 3)
            J = _yaw_jacobian(s @ rot_z(theta).T)[0]  # d(moved)/d(tx,ty,tz,theta)
            eps = 1e-6
            J_fd = np.zeros((3, 4))
            for k in range(3):
                dt = np.zeros(3)
                dt[k] = eps
                J_fd[:, k] = ((s @ rot_z(theta).T + t + dt) - (s @ rot_z(theta).T + t - dt))[0] / (2 * eps)
            J_fd[:, 3] = ((s @ rot_z(theta + eps).T + t) - (s @ rot_z(theta - eps).T + t))[0] / (2 * eps)
            ref = np.abs(J_fd).max()
            assert np.abs(J - J_fd).max() <= 1e-5 * max(ref, 1.0)


class TestP2pIcp:
    def test_identity_on_identical(self, room):
        res = p2p_icp(room, room, Pose3.identity(), PARAMS)
        assert res.converged
        assert np.linalg.norm(res.transform.t) < 1e-9
        assert res.transform.rotation_angle() < 1e-9

    def test_small_perturbation_recovered(self, room):
        rng = np.random.default_rng(1)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = np.radians(4.0)
        q = np.concatenate([np.sin(angle / 2) * axis, [np.cos(angle / 2)]])
        true = Pose3(q, rng.uniform(-0.08, 0.08, 3))
        res = p2p_icp(room, true.apply(room), Pose3.identity(), PARAMS)
        err = relative(res.transform, true)
        assert np.linalg.norm(err.t) < 1e-4

    def test_disjoint_clouds(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (50, 3))
        b = a + np.array([100.0, 0.0, 0.0])
        res = p2p_icp(a, b, Pose3.identity(), PARAMS)
        assert res.fitness_f1 == 0.0
        assert res.fitness_f2 == 0.0
        assert not res.converged

    def test_conjugation_invariance(self, room):
        rng = np.random.default_rng(3)
        sub = room[:: 6]
        true = pose_rz(np.radians(3.0), [0.05, -0.04, 0.02])
        target = true.apply(sub)
        base = p2p_icp(sub, target, Pose3.identity(), PARAMS)

        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = 0.7
        G = Pose3(
            np.concatenate([np.sin(angle / 2) * axis, [np.cos(angle / 2)]]),
            rng.uniform(-3, 3, 3),
        )
        conj = p2p_icp(
            G.apply(sub),
            G.apply(target),
            compose(compose(G, Pose3.identity()), G.inverse()),
            PARAMS,
        )
        expect = compose(compose(G, base.transform), G.inverse())
        np.testing.assert_allclose(conj.transform.matrix(), expect.matrix(), atol=1e-6)

    def test_cost_non_increasing(self, room):
        true = pose_rz(np.radians(4.0), [0.1, 0.05, 0.02])
        res = p2p_icp(room, true.apply(room), Pose3.identity(), PARAMS)
        for pre, post in res.iteration_costs:
            assert post <= pre + 1e-12


class TestFitness:
    def test_subset_perfect(self, room):
        idx = NnIndex(room)
        f1, f2, rmse = compute_fitness(room[::3], idx, 0.01, 0.03, 0.30)
        assert f1 == 1.0 and f2 == 1.0
        assert rmse == pytest.approx(0.0, abs=1e-12)

    def test_planar_offset_two_centimeters(self):
        # dense plane z=0; source = same plane lifted 2 cm -> NN distance 2 cm
        g = np.linspace(0, 10, 400)
        X, Y = np.meshgrid(g, g, indexing="ij")
        plane = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], 1)
        idx = NnIndex(plane)
        src = plane[::7] + np.array([0.0, 0.0, 0.02])
        f1, f2, rmse = compute_fitness(src, idx, 0.01, 0.03, 0.30)
        assert f1 == 0.0
        assert f2 == 1.0
        assert rmse == pytest.approx(0.02, abs=1e-3)

    def test_all_points_outside_exclusion(self):
        tgt = NnIndex(np.zeros((10, 3)) + np.arange(10)[:, None])
        src = np.full((5, 3), 1000.0)
        with pytest.raises(NoPointsInExclusionZone):
            compute_fitness(src, tgt, 0.01, 0.03, 0.30)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(4)
        tgt = NnIndex(rng.uniform(0, 5, (500, 3)))
        src = rng.uniform(0, 5, (200, 3))
        f1, f2, _ = compute_fitness(src, tgt, 0.05, 0.2, 1.0)
        assert f2 >= f1

    def test_inlier_fraction_counts_all_points(self):
        tgt = NnIndex(np.zeros((1, 3)))
        src = np.array([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        assert inlier_fraction(src, tgt, 0.3) == 0.5


class TestClassify:
    def result(self, f1, f2, n_excl=10):
        return RegistrationResult(
            transform=Pose3.identity(),
            fitness_f1=f1,
            fitness_f2=f2,
            inlier_rmse=0.0,
            converged=True,
            n_within_exclusion=n_excl,
        )

    def test_perfect(self):
        assert classify_alignment(self.result(1.0, 1.0)) is AlignmentClass.PERFECT

    def test_outside_map(self):
        assert classify_alignment(self.result(0.0, 0.0, n_excl=0)) is AlignmentClass.OUTSIDE_MAP

    def test_good_from_threshold_table(self):
        assert classify_alignment(self.result(0.1, 0.55)) is AlignmentClass.GOOD

    def test_bad(self):
        assert classify_alignment(self.result(0.1, 0.2)) is AlignmentClass.BAD


class TestSphereCrop:
    def test_single_center_membership(self):
        g = np.arange(-3.0, 4.0)
        X, Y, Z = np.meshgrid(g, g, g, indexing="ij")
        grid = np.stack([X.ravel(), Y.ravel(), Z.ravel()], 1)
        crops = sphere_crop_targets(grid, [Pose3.identity()], 2.0)
        assert len(crops) == 1
        expect = grid[np.linalg.norm(grid, axis=1) <= 2.0]
        got = crops[0].xyz
        assert got.shape == expect.shape
        assert set(map(tuple, got)) == set(map(tuple, expect))

    def test_two_distant_groups(self):
        positions = np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]])
        groups = group_keyframes(positions, radius=7.5)
        assert groups == [[0], [1]]

    def test_consecutive_grouping(self):
        positions = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [9, 0, 0], [10, 0, 0]], dtype=float)
        groups = group_keyframes(positions, radius=3.0)
        assert groups == [[0, 1, 2], [3, 4]]


class TestPointCovariances:
    def test_planar_neighborhood_regularized(self):
        rng = np.random.default_rng(5)
        pts = np.column_stack(
            [rng.uniform(0, 4, 400), rng.uniform(0, 4, 400), np.zeros(400)]
        )
        cov = point_covariances(pts, 20, 1e-3)
        # normal of a z=0 plane is z: covariance in z must be ~epsilon
        assert np.allclose(cov[:, 2, 2], 1e-3, atol=1e-6)
        # in-plane directions carry unit weight
        eigvals = np.linalg.eigvalsh(cov)
        assert np.allclose(eigvals[:, 1:], 1.0, atol=1e-6)
