import numpy as np
import pytest

from motionforge import metrics as mx
from motionforge import robot as rb
from motionforge import policy as pol
from motionforge.errors import DegenerateProfile
from motionforge.geometry import Pose, rotation_about_axis
from motionforge.scene import Scene
from motionforge.scenegen import PlanningProblem
from motionforge.trajectory import Trajectory

from conftest import make_box, make_floor


def sparc_reference(v, fs):
    """Direct-summation reference implementation of the spectral arc length."""
    v = np.asarray(v, dtype=float)
    n_fft = int(2 ** np.ceil(np.log2(4 * len(v))))
    spectrum = np.zeros(n_fft // 2 + 1, dtype=complex)
    for k in range(len(spectrum)):
        for t in range(len(v)):
            spectrum[k] += v[t] * np.exp(-2j * np.pi * k * t / n_fft)
    mag = np.abs(spectrum)
    vhat = mag / mag[0]
    freqs = np.arange(len(mag)) * fs / n_fft
    keep = np.flatnonzero((freqs <= 10.0) & (vhat >= 0.05))
    sel = slice(0, keep[-1] + 1)
    f = freqs[sel] / freqs[sel][-1]
    vh = vhat[sel]
    return float(-np.sum(np.sqrt(np.diff(f) ** 2 + np.diff(vh) ** 2)))


def min_jerk_speed(n=64):
    t = np.linspace(0.0, 1.0, n)
    return 30 * t ** 2 - 60 * t ** 3 + 30 * t ** 4


class TestSparc:
    def test_matches_direct_summation(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            v = np.abs(rng.normal(1.0, 0.3, size=48))
            fs = float(rng.uniform(8.0, 20.0))
            assert mx.sparc(v, fs) == pytest.approx(sparc_reference(v, fs), abs=1e-9)

    def test_scale_invariance(self):
        rng = np.random.default_rng(1)
        v = np.abs(rng.normal(1.0, 0.3, size=64))
        a = mx.sparc(v, 12.5)
        b = mx.sparc(1000.0 * v, 12.5)
        assert a == pytest.approx(b, abs=1e-9)

    def test_smoother_profile_scores_higher(self):
        fs = 1.0 / 0.08
        smooth = min_jerk_speed(64)
        t = np.linspace(0.0, 1.0, 64)
        rippled = smooth * (1.0 + 0.35 * np.sin(2 * np.pi * 5.5 * t * 64 * 0.08))
        s_smooth = mx.sparc(smooth, fs)
        s_ripple = mx.sparc(np.abs(rippled), fs)
        assert s_smooth > s_ripple

    def test_zero_profile_raises(self):
        with pytest.raises(DegenerateProfile):
            mx.sparc(np.zeros(16), 12.5)

    def test_trajectory_sparc_pads_short_profiles(self, robot):
        traj = Trajectory(np.vstack([robot.neutral,
                                     robot.neutral + 0.05,
                                     robot.neutral + 0.10]))
        sj, se = mx.trajectory_sparc(traj, robot)
        assert np.isfinite(sj) and np.isfinite(se)


class TestOrientationError:
    def test_symmetric_and_known_values(self, rng):
        for _ in range(100):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = float(rng.uniform(0.0, np.pi * 0.95))
            base_axis = rng.normal(size=3)
            base_axis /= np.linalg.norm(base_axis)
            Ra = rotation_about_axis(base_axis, float(rng.uniform(0, np.pi)))
            Rb = Ra @ rotation_about_axis(axis, ang)
            assert mx.orientation_error(Ra, Rb) == pytest.approx(ang, abs=1e-9)
            assert abs(mx.orientation_error(Ra, Rb)
                       - mx.orientation_error(Rb, Ra)) <= 1e-12

    def test_identity_is_zero(self):
        assert mx.orientation_error(np.eye(3), np.eye(3)) <= 1e-12


class TestCollisionEnsemble:
    def _problem(self, robot, scene):
        target = Pose.from_matrix(rb.fk_link_matrices(robot, robot.neutral)[-1],
                                  check=False)
        return PlanningProblem(scene, robot.neutral, target, None, 0)

    def test_deep_penetration_flagged(self, robot):
        scene = Scene([make_box([0.35, 0.0, 0.6], [0.25, 0.5, 0.3])], "tabletop")
        problem = self._problem(robot, scene)
        traj = Trajectory(np.vstack([robot.neutral, robot.neutral]))
        env, _ = mx.collision_ensemble(traj, problem, robot)
        assert env

    def test_distant_obstacles_never_flag(self, robot, rng):
        problem = self._problem(robot, Scene([make_floor(-5.0)], "tabletop"))
        configs = np.vstack([robot.clamp(robot.neutral + rng.normal(0, 0.2, 7))
                             for _ in range(6)])
        env, _ = mx.collision_ensemble(Trajectory(configs), problem, robot)
        assert not env

    def test_grazing_tangency_not_flagged(self, robot):
        # a box whose surface exactly touches the outermost sphere: member (a)
        # sees distance == radius and member (b) samples strictly inside, so
        # neither fires and the ensemble stays quiet
        centers = rb.sphere_centers(robot, robot.neutral)
        radii = robot.sphere_radius
        i = int(np.argmax(centers[:, 0] + radii))
        x_face = centers[i, 0] + radii[i]
        scene = Scene([make_box([x_face + 0.5, 0.0, centers[i, 2]],
                                [0.5 - 1e-9, 0.4, 0.4])], "tabletop")
        problem = self._problem(robot, scene)
        traj = Trajectory(np.vstack([robot.neutral, robot.neutral]))
        env, _ = mx.collision_ensemble(traj, problem, robot)
        assert not env

    def test_members_vote_independently(self, robot):
        # shallow overlap thinner than the member (b) shrink margin: member
        # (a) fires alone and the ensemble must not flag
        centers = rb.sphere_centers(robot, robot.neutral)
        radii = robot.sphere_radius
        i = int(np.argmax(centers[:, 0] + radii))
        depth = 0.2 * (1.0 - mx.DENSE_SCALE) * radii[i]
        x_face = centers[i, 0] + radii[i] - depth
        scene = Scene([make_box([x_face + 0.5, 0.0, centers[i, 2]],
                                [0.5, 0.4, 0.4])], "tabletop")
        problem = self._problem(robot, scene)
        assert mx._member_a_env(robot, robot.neutral, scene)
        traj = Trajectory(np.vstack([robot.neutral, robot.neutral]))
        env, _ = mx.collision_ensemble(traj, problem, robot)
        if mx._member_b_env(robot, robot.neutral, scene):
            assert env
        else:
            assert not env


def make_result(traj, **kw):
    base = dict(trajectory=traj, terminated_by="target_reached",
                final_pos_err=0.0, final_ori_err=0.0, env_collision=False,
                self_collision=False, joint_violation=False,
                in_correct_volume=True, in_wrong_volume=False,
                sparc_joint=-2.0, sparc_ee=-2.0, wall_time=0.1)
    base.update(kw)
    return mx.RolloutResult(**base)


class TestSuccessCheck:
    def _traj(self, robot):
        return Trajectory(np.vstack([robot.neutral, robot.neutral]))

    def test_threshold_edges(self, robot):
        traj = self._traj(robot)
        assert mx.success_check(make_result(traj, final_pos_err=0.009,
                                            final_ori_err=np.deg2rad(14.0)))
        assert not mx.success_check(make_result(traj, final_pos_err=0.011))
        assert not mx.success_check(make_result(traj,
                                                final_ori_err=np.deg2rad(16.0)))
        assert not mx.success_check(make_result(traj, env_collision=True))
        assert not mx.success_check(make_result(traj, self_collision=True))
        assert not mx.success_check(make_result(traj, joint_violation=True))
        assert not mx.success_check(make_result(traj, in_correct_volume=False))
        assert not mx.success_check(make_result(traj, in_wrong_volume=True))

    def test_monotone_in_position_error(self, robot):
        traj = self._traj(robot)
        errs = [0.0, 0.005, 0.0099, 0.0101, 0.05]
        oks = [mx.success_check(make_result(traj, final_pos_err=e)) for e in errs]
        # once an error fails, every larger error fails too
        assert oks == sorted(oks, reverse=True)


class TestRollout:
    def _trivial_problem(self, robot):
        # the start already satisfies the target, so step 0 terminates
        target = Pose.from_matrix(rb.fk_link_matrices(robot, robot.neutral)[-1],
                                  check=False)
        scene = Scene([make_floor(-2.0)], "tabletop")
        return PlanningProblem(scene, robot.neutral, target, None, 0)

    def test_terminates_at_step_zero_when_on_target(self, robot):
        params = pol.build_policy("desk", rng=np.random.default_rng(2))
        problem = self._trivial_problem(robot)
        config = mx.RolloutConfig(cloud_budget=(32, 16, 8))
        result = mx.rollout(params, problem, robot, config=config)
        assert result.terminated_by == "target_reached"
        assert len(result.trajectory) == 2
        assert mx.success_check(result)

    def test_untrained_policy_exhausts_budget(self, robot):
        params = pol.build_policy("desk", rng=np.random.default_rng(3))
        problem = self._trivial_problem(robot)
        far = Pose(problem.target.rotation,
                   problem.target.translation + np.array([0.0, 0.0, 0.4]))
        moved = PlanningProblem(problem.scene, problem.start, far, None, 1)
        config = mx.RolloutConfig(horizon=0.4, cloud_budget=(32, 16, 8))
        result = mx.rollout(params, moved, robot, config=config)
        assert result.terminated_by == "step_budget"
        assert len(result.trajectory) == int(np.ceil(0.4 / config.dt)) + 1

    def test_deterministic_given_seed(self, robot):
        params = pol.build_policy("desk", rng=np.random.default_rng(4))
        problem = self._trivial_problem(robot)
        far = Pose(problem.target.rotation,
                   problem.target.translation + np.array([0.0, 0.0, 0.3]))
        moved = PlanningProblem(problem.scene, problem.start, far, None, 2)
        config = mx.RolloutConfig(horizon=0.4, cloud_budget=(32, 16, 8), seed=9)
        a = mx.rollout(params, moved, robot, config=config)
        b = mx.rollout(params, moved, robot, config=config)
        assert np.array_equal(a.trajectory.configs, b.trajectory.configs)

    def test_replay_of_perfect_trajectory_succeeds(self, robot):
        problem = self._trivial_problem(robot)
        traj = Trajectory(np.vstack([robot.neutral - 0.1, robot.neutral]))
        result = mx.replay_rollout(traj, problem, robot)
        assert result.terminated_by == "target_reached"
        assert mx.success_check(result)

    def test_straight_line_baseline_runs(self, robot):
        problem = self._trivial_problem(robot)
        result = mx.straight_line_rollout(problem, robot)
        assert result.trajectory.provenance == "baseline"
        assert result.final_pos_err <= 0.05


class TestDynamicScene:
    def test_block_moves_and_base_preserved(self, robot):
        scene = Scene([make_floor(-2.0)], "tabletop")
        target = Pose.from_matrix(rb.fk_link_matrices(robot, robot.neutral)[-1],
                                  check=False)
        problem = PlanningProblem(scene, robot.neutral, target, None, 0)
        fn = mx.make_dynamic_scene_fn(problem, mx.DYNAMIC_SPEEDS["medium"],
                                      np.random.default_rng(5))
        s0, s1 = fn(0.0), fn(1.0)
        assert len(s0.primitives) == len(scene.primitives) + 1
        c0 = s0.primitives[-1].pose.translation
        c1 = s1.primitives[-1].pose.translation
        assert np.linalg.norm(c1 - c0) > 1e-3
        # z stays fixed and the orbit stays within its amplitude
        assert c0[2] == c1[2]
        assert np.all(np.abs((c0 - target.translation - [0, 0, 0.12])[:2]) <= 0.15 + 1e-12)

    def test_peak_speed_matches_request(self, robot):
        scene = Scene([make_floor(-5.0)], "tabletop")
        target = Pose(np.eye(3), np.array([0.5, 0.0, 0.3]))
        problem = PlanningProblem(scene, robot.neutral, target, None, 0)
        for name, speed in mx.DYNAMIC_SPEEDS.items():
            fn = mx.make_dynamic_scene_fn(problem, speed, np.random.default_rng(6))
            ts = np.linspace(0.0, 40.0, 4000)
            pos = np.array([fn(t).primitives[-1].pose.translation for t in ts])
            v = np.linalg.norm(np.diff(pos, axis=0), axis=1) / np.diff(ts)
            # x-rate peaks at the requested speed; the diagonal sum overshoots
            # by at most sqrt(1 + 2) with the incommensurate y-rate
            assert v.max() <= speed * np.sqrt(3.0) * 1.01
            assert v.max() >= 0.8 * speed


class TestAggregation:
    def test_summary_counts_and_rates(self, robot):
        traj = Trajectory(np.vstack([robot.neutral, robot.neutral]))
        results = [make_result(traj),
                   make_result(traj, final_pos_err=0.5,
                               terminated_by="step_budget"),
                   make_result(traj, env_collision=True)]
        problems = [None, None, None]
        report = mx.summarize_results(results, problems)
        assert report.n_problems == 3 and report.n_success == 1
        assert report.success_rate == pytest.approx(1 / 3)
        assert report.env_collision_rate == pytest.approx(1 / 3)
        assert report.pos_err_quantiles[0] == pytest.approx(0.0)
        d = report.to_dict()
        assert d["n_success"] == 1
        assert "success rate" in report.table()

    def test_smooth_rate_uses_both_scores(self, robot):
        traj = Trajectory(np.vstack([robot.neutral, robot.neutral]))
        results = [make_result(traj, sparc_joint=-2.0, sparc_ee=-1.0),
                   make_result(traj, sparc_joint=-2.0, sparc_ee=-2.0)]
        report = mx.summarize_results(results, [None, None])
        assert report.smooth_rate == pytest.approx(0.5)
