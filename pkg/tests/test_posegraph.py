import numpy as np
import pytest
from worlds import pose_rz

from mapanchor.errors import MissingVariable, SingularNormalEquations
from mapanchor.geometry import Pose3, compose, exp_se3, log_se3, relative
from mapanchor.posegraph import (
    AnchoredBetweenFactor,
    BetweenFactor,
    GraphProblem,
    NoiseModel,
    PriorFactor,
    SolveConfig,
    residual,
    solve,
    to_world,
)
from mapanchor.session import Keyframe, Session


def random_pose(rng, trans=3.0, angle=1.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    a = rng.uniform(-angle, angle)
    q = np.concatenate([np.sin(a / 2) * axis, [np.cos(a / 2)]])
    return Pose3(q, rng.uniform(-trans, trans, 3))


UNIT = NoiseModel.isotropic(1.0)


class TestResiduals:
    def test_prior_zero_at_consistency(self):
        rng = np.random.default_rng(0)
        x = random_pose(rng)
        f = PriorFactor(("a", 0), x, UNIT)
        np.testing.assert_allclose(residual(f, {("a", 0): x}), np.zeros(6), atol=1e-12)

    def test_between_zero_at_consistency(self):
        rng = np.random.default_rng(1)
        xi, xj = random_pose(rng), random_pose(rng)
        u = relative(xj, xi)
        f = BetweenFactor(("a", 0), ("a", 1), u, UNIT)
        r = residual(f, {("a", 0): xi, ("a", 1): xj})
        np.testing.assert_allclose(r, np.zeros(6), atol=1e-12)

    def test_anchored_zero_at_ground_truth(self):
        rng = np.random.default_rng(2)
        d_r, d_q = random_pose(rng), random_pose(rng)
        x_r, x_q = random_pose(rng), random_pose(rng)
        c = relative(compose(d_r, x_r), compose(d_q, x_q))
        f = AnchoredBetweenFactor(
            ("r", 0), ("q", 0), ("ar", 0), ("aq", 0), c, UNIT
        )
        vals = {("r", 0): x_r, ("q", 0): x_q, ("ar", 0): d_r, ("aq", 0): d_q}
        np.testing.assert_allclose(residual(f, vals), np.zeros(6), atol=1e-12)

    def test_missing_variable(self):
        f = PriorFactor(("a", 0), Pose3.identity(), UNIT)
        with pytest.raises(MissingVariable):
            residual(f, {})

    def test_whitening_scaling(self):
        rng = np.random.default_rng(3)
        x = random_pose(rng)
        p = random_pose(rng)
        r1 = residual(PriorFactor(("a", 0), p, NoiseModel.isotropic(0.5)), {("a", 0): x})
        r2 = residual(PriorFactor(("a", 0), p, NoiseModel.isotropic(1.0)), {("a", 0): x})
        np.testing.assert_allclose(np.linalg.norm(r1), 2 * np.linalg.norm(r2), rtol=1e-12)


def fd_jacobians(factor, values, eps=1e-6):
    """Central finite differences of the unwhitened residual."""
    out = {}
    for node in factor.nodes():
        J = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = eps
            vp = dict(values)
            vp[node] = compose(values[node], exp_se3(d))
            vm = dict(values)
            vm[node] = compose(values[node], exp_se3(-d))
            J[:, k] = (factor.residual(vp) - factor.residual(vm)) / (2 * eps)
        out[node] = J
    return out


def assert_jacobians_match(factor, values, rtol=1e-5):
    _, jacs = factor.jacobians(values)
    fd = fd_jacobians(factor, values)
    for node, J in jacs.items():
        scale = max(np.abs(fd[node]).max(), 1.0)
        np.testing.assert_allclose(J, fd[node], atol=rtol * scale)


class TestJacobians:
    def test_prior(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            f = PriorFactor(("a", 0), random_pose(rng), UNIT)
            assert_jacobians_match(f, {("a", 0): random_pose(rng)})

    def test_between(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            f = BetweenFactor(("a", 0), ("a", 1), random_pose(rng), UNIT)
            vals = {("a", 0): random_pose(rng), ("a", 1): random_pose(rng)}
            assert_jacobians_match(f, vals)

    def test_anchored(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            f = AnchoredBetweenFactor(
                ("r", 0), ("q", 0), ("ar", 0), ("aq", 0), random_pose(rng), UNIT
            )
            vals = {
                ("r", 0): random_pose(rng),
                ("q", 0): random_pose(rng),
                ("ar", 0): random_pose(rng),
                ("aq", 0): random_pose(rng),
            }
            assert_jacobians_match(f, vals)


class TestSolve:
    def test_requires_prior(self):
        rng = np.random.default_rng(7)
        x = random_pose(rng)
        p = GraphProblem({("a", 0): x, ("a", 1): x})
        p.add(BetweenFactor(("a", 0), ("a", 1), Pose3.identity(), UNIT))
        with pytest.raises(SingularNormalEquations):
            solve(p)

    def test_priors_only_already_optimal(self):
        rng = np.random.default_rng(8)
        x = random_pose(rng)
        p = GraphProblem({("a", 0): x})
        p.add(PriorFactor(("a", 0), x, UNIT))
        values, report = solve(p)
        assert report.initial_cost == pytest.approx(0.0, abs=1e-18)
        assert report.final_cost == pytest.approx(0.0, abs=1e-18)
        np.testing.assert_allclose(values[("a", 0)].matrix(), x.matrix(), atol=1e-12)

    def test_chain_with_loop_converges_to_consistency(self):
        # noisy odometry chain, exact loop; cost must drop and poses reconcile
        rng = np.random.default_rng(9)
        true = [Pose3.identity()]
        for _ in range(5):
            true.append(compose(true[-1], pose_rz(0.4, [1.0, 0.2, 0.0])))
        meas = [
            compose(relative(true[i + 1], true[i]), exp_se3(rng.normal(0, 0.01, 6)))
            for i in range(5)
        ]
        init = [Pose3.identity()]
        for u in meas:
            init.append(compose(init[-1], u))
        p = GraphProblem({("a", i): init[i] for i in range(6)})
        p.add(PriorFactor(("a", 0), Pose3.identity(), NoiseModel.isotropic(1e-6)))
        for i, u in enumerate(meas):
            p.add(BetweenFactor(("a", i), ("a", i + 1), u, NoiseModel.isotropic(0.01)))
        p.add(
            BetweenFactor(
                ("a", 0), ("a", 5), relative(true[5], true[0]), NoiseModel.isotropic(1e-4)
            )
        )
        values, report = solve(p)
        assert report.final_cost < report.initial_cost
        got = values[("a", 5)]
        err = relative(got, true[5])
        assert np.linalg.norm(err.t) < 0.02

    def test_cost_non_increasing_accepted_steps(self):
        rng = np.random.default_rng(10)
        p = GraphProblem({("a", i): random_pose(rng) for i in range(4)})
        p.add(PriorFactor(("a", 0), Pose3.identity(), NoiseModel.isotropic(1e-3)))
        for i in range(3):
            p.add(BetweenFactor(("a", i), ("a", i + 1), random_pose(rng), UNIT))
        _, report = solve(p)
        diffs = np.diff(report.accepted_costs)
        assert np.all(diffs <= 1e-12)

    def test_single_encounter_moves_only_anchor(self):
        # two identical sessions rigidly offset; one noiseless encounter
        rng = np.random.default_rng(11)
        n = 5
        local = [Pose3.identity()]
        for _ in range(n - 1):
            local.append(compose(local[-1], pose_rz(0.3, [1.0, 0.0, 0.0])))
        offset = pose_rz(0.9, [4.0, -2.0, 0.5])  # true anchor of the query session

        variables = {}
        for i, x in enumerate(local):
            variables[("ref", i)] = x
            variables[("query", i)] = x
        variables[("anchor_ref", 0)] = Pose3.identity()
        variables[("anchor_query", 0)] = Pose3.identity()

        tiny = NoiseModel.isotropic(1e-9)
        # "exact odometry": noiseless measurements carry tight noise, otherwise
        # the loose anchor prior trades anchor error against odometry slack
        odo = NoiseModel.isotropic(1e-4)
        loose = NoiseModel.isotropic(np.pi)
        p = GraphProblem(variables)
        p.add(PriorFactor(("anchor_ref", 0), Pose3.identity(), tiny))
        p.add(PriorFactor(("anchor_query", 0), Pose3.identity(), loose))
        for i in range(n):
            p.add(PriorFactor(("ref", i), local[i], tiny))
        p.add(PriorFactor(("query", 0), local[0], tiny))
        for i in range(n - 1):
            u = relative(local[i + 1], local[i])
            p.add(BetweenFactor(("ref", i), ("ref", i + 1), u, odo))
            p.add(BetweenFactor(("query", i), ("query", i + 1), u, odo))
        # encounter between ref kf 2 and query kf 2 at ground truth:
        # world ref = local[2], world query = offset * local[2]
        c = relative(local[2], compose(offset, local[2]))
        # the encounter is noiseless, so it carries tight noise; the loose
        # anchor prior then cannot bias the recovered offset measurably
        p.add(
            AnchoredBetweenFactor(
                ("ref", 2), ("query", 2), ("anchor_ref", 0), ("anchor_query", 0), c,
                NoiseModel.isotropic(1e-4),
            )
        )
        values, report = solve(p)

        anchor = values[("anchor_query", 0)]
        err = relative(anchor, offset)
        assert np.linalg.norm(err.t) < 1e-6
        assert err.rotation_angle() < 1e-6
        # intra-session relative poses unchanged
        for i in range(n - 1):
            for label in ("ref", "query"):
                got = relative(values[(label, i + 1)], values[(label, i)])
                expect = relative(local[i + 1], local[i])
                assert (
                    np.max(np.abs(got.matrix() - expect.matrix())) < 1e-6
                ), f"{label} {i}"
        # reference poses pinned
        for i in range(n):
            moved = relative(values[("ref", i)], local[i])
            assert np.linalg.norm(moved.t) < 1e-6
            assert moved.rotation_angle() < 1e-6

    def test_cauchy_downweights_outlier(self):
        # one wildly wrong loop among good odometry; robust solve should stay
        # near odometry, non-robust should get dragged
        rng = np.random.default_rng(12)
        n = 4
        true = [Pose3.identity()]
        for _ in range(n - 1):
            true.append(compose(true[-1], pose_rz(0.0, [1.0, 0.0, 0.0])))
        bad_loop = compose(relative(true[3], true[0]), exp_se3([3.0, 0, 0, 0, 0, 0]))

        def build(noise_loop):
            p = GraphProblem({("a", i): true[i] for i in range(n)})
            p.add(PriorFactor(("a", 0), true[0], NoiseModel.isotropic(1e-9)))
            for i in range(n - 1):
                p.add(
                    BetweenFactor(
                        ("a", i), ("a", i + 1), relative(true[i + 1], true[i]),
                        NoiseModel.isotropic(0.01),
                    )
                )
            p.add(BetweenFactor(("a", 0), ("a", 3), bad_loop, noise_loop))
            return p

        robust, _ = solve(build(NoiseModel.isotropic(0.7071, cauchy_k=1.0)))
        plain, _ = solve(build(NoiseModel.isotropic(0.7071)))
        err_robust = np.linalg.norm(relative(robust[("a", 3)], true[3]).t)
        err_plain = np.linalg.norm(relative(plain[("a", 3)], true[3]).t)
        assert err_robust < err_plain
        assert err_robust < 0.3


class TestToWorld:
    def make_session(self):
        kfs = [
            Keyframe(index=i, timestamp=float(i), odom_pose=pose_rz(0.1 * i, [i, 0, 0]))
            for i in range(4)
        ]
        return Session.from_keyframes(kfs, frame_label="query")

    def test_identity_anchor(self):
        s = self.make_session()
        vals = {("query", i): s.keyframes[i].odom_pose for i in range(4)}
        traj = to_world(vals, Pose3.identity(), s)
        for (t, p), kf in zip(traj.items, s.keyframes):
            np.testing.assert_allclose(p.matrix(), kf.odom_pose.matrix(), atol=1e-12)

    def test_translation_anchor_shifts_positions(self):
        s = self.make_session()
        vals = {("query", i): s.keyframes[i].odom_pose for i in range(4)}
        anchor = Pose3.from_rt(np.eye(3), [1.0, 2.0, 3.0])
        traj = to_world(vals, anchor, s)
        for (t, p), kf in zip(traj.items, s.keyframes):
            np.testing.assert_allclose(p.t, kf.odom_pose.t + [1, 2, 3], atol=1e-12)

    def test_world_relatives_equal_local_relatives(self):
        rng = np.random.default_rng(13)
        s = self.make_session()
        vals = {("query", i): s.keyframes[i].odom_pose for i in range(4)}
        anchor = random_pose(rng)
        traj = to_world(vals, anchor, s)
        for i in range(3):
            world_rel = relative(traj.items[i + 1][1], traj.items[i][1])
            local_rel = relative(
                s.keyframes[i + 1].odom_pose, s.keyframes[i].odom_pose
            )
            np.testing.assert_allclose(world_rel.matrix(), local_rel.matrix(), atol=1e-9)
