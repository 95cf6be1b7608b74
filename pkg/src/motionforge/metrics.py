"""Closed-loop rollouts and the evaluation metric suite: termination rules,
success gates, orientation error, spectral-arc-length smoothness, the
collision-checker ensemble, and the moving-block stress test."""

import time
from dataclasses import dataclass

import numpy as np

from . import robot as rb
from .errors import DegenerateProfile
from .geometry import Pose, geodesic_angle
from .policy import TrainingExample, assemble_input, policy_forward, policy_step
from .scene import Primitive, Scene, per_primitive_sdf, sdf_eval, self_collision
from .trajectory import DEFAULT_DT, Trajectory

POS_THRESHOLD = 0.01            # m
ORI_THRESHOLD = np.deg2rad(15.0)
ROLLOUT_HORIZON = 20.0          # s
SPARC_THRESHOLD = -1.6
SPARC_MAX_CUTOFF = 10.0         # Hz
SPARC_AMP_THRESHOLD = 0.05
DENSE_POINTS_PER_LINK = 64
DENSE_SCALE = 0.95              # member (b) samples sit inside the spheres
DYNAMIC_SPEEDS = {"slow": 0.02, "medium": 0.06, "fast": 0.12}   # m/s


@dataclass
class RolloutResult:
    trajectory: Trajectory
    terminated_by: str          # target_reached | step_budget
    final_pos_err: float
    final_ori_err: float
    env_collision: bool
    self_collision: bool
    joint_violation: bool
    in_correct_volume: bool
    in_wrong_volume: bool
    sparc_joint: float
    sparc_ee: float
    wall_time: float

    def __post_init__(self):
        assert self.final_pos_err >= 0.0
        assert self.terminated_by in ("target_reached", "step_budget")

    def to_dict(self):
        return {"trajectory": self.trajectory.to_dict(),
                "terminated_by": self.terminated_by,
                "final_pos_err": self.final_pos_err,
                "final_ori_err": self.final_ori_err,
                "env_collision": self.env_collision,
                "self_collision": self.self_collision,
                "joint_violation": self.joint_violation,
                "in_correct_volume": self.in_correct_volume,
                "in_wrong_volume": self.in_wrong_volume,
                "sparc_joint": self.sparc_joint, "sparc_ee": self.sparc_ee,
                "wall_time": self.wall_time}


def orientation_error(R_final, R_target):
    """Geodesic angle between two rotations, radians."""
    return geodesic_angle(R_final, R_target)


# ---------------------------------------------------------------------------
# SPARC


def sparc(speed_profile, fs):
    """Spectral arc length of a speed profile sampled at rate fs (Hz).

    Zero-pads to at least 4x the length (next power of two), normalizes the
    magnitude spectrum by its DC value, picks the adaptive cutoff as the
    largest frequency <= 10 Hz where the normalized spectrum is >= 0.05, and
    integrates the normalized arc length up to that cutoff.
    """
    v = np.asarray(speed_profile, dtype=float)
    assert len(v) >= 8 and fs > 0
    if np.all(v == 0.0):
        raise DegenerateProfile("speed profile identically zero")
    n_fft = int(2 ** np.ceil(np.log2(4 * len(v))))
    mag = np.abs(np.fft.rfft(v, n=n_fft))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / fs)
    vhat = mag / mag[0]
    in_band = freqs <= SPARC_MAX_CUTOFF
    above = in_band & (vhat >= SPARC_AMP_THRESHOLD)
    cutoff_idx = int(np.flatnonzero(above)[-1])
    sel = slice(0, cutoff_idx + 1)
    f_sel = freqs[sel]
    v_sel = vhat[sel]
    if len(f_sel) < 2:
        return 0.0
    f_range = f_sel[-1]
    df = np.diff(f_sel) / f_range
    dv = np.diff(v_sel)
    return float(-np.sum(np.sqrt(df ** 2 + dv ** 2)))


def trajectory_sparc(traj, robot):
    """(joint-space, EE-translation) SPARC scores of a trajectory."""
    fs = 1.0 / traj.dt
    vj = traj.joint_speed_profile()
    ve = traj.ee_speed_profile(robot)
    pad = lambda v: v if len(v) >= 8 else np.concatenate([v, np.zeros(8 - len(v))])
    return sparc(pad(vj), fs), sparc(pad(ve), fs)


# ---------------------------------------------------------------------------
# collision ensemble


def _dense_link_points(robot):
    """64 fixed points per link on slightly shrunken collision spheres."""
    rng = np.random.default_rng(20240119)
    pts, links = [], []
    for link in range(8):
        idx = np.flatnonzero(robot.sphere_link == link)
        if len(idx) == 0:
            continue
        for k in range(DENSE_POINTS_PER_LINK):
            i = idx[k % len(idx)]
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            pts.append(robot.sphere_local[i] + DENSE_SCALE * robot.sphere_radius[i] * v)
            links.append(link)
    return np.asarray(pts), np.asarray(links, dtype=int)


_DENSE_CACHE = {}


def _dense_points_world(robot, q):
    key = id(robot)
    if key not in _DENSE_CACHE:
        _DENSE_CACHE[key] = _dense_link_points(robot)
    local, links = _DENSE_CACHE[key]
    mats = rb.fk_link_matrices(robot, q)
    R = mats[links, :3, :3]
    t = mats[links, :3, 3]
    return np.einsum("nij,nj->ni", R, local) + t, links


def _member_a_env(robot, q, scene):
    d = sdf_eval(scene, rb.sphere_centers(robot, q))
    return bool(np.any(d < robot.sphere_radius))


def _member_b_env(robot, q, scene):
    pts, _ = _dense_points_world(robot, q)
    if not scene.primitives:
        return False
    return bool(np.any(per_primitive_sdf(scene, pts) < 0.0))


def _member_b_self(robot, q):
    centers = rb.sphere_centers(robot, q)
    i, j = robot.self_pairs[:, 0], robot.self_pairs[:, 1]
    gap = np.linalg.norm(centers[i] - centers[j], axis=1)
    return bool(np.any(gap < DENSE_SCALE * (robot.sphere_radius[i] + robot.sphere_radius[j])))


def collision_ensemble(traj, problem, robot):
    """(env_collision, self_collision): flagged only when both members agree."""
    env = False
    self_c = False
    for q in traj.configs:
        if not env:
            env = (_member_a_env(robot, q, problem.scene)
                   and _member_b_env(robot, q, problem.scene))
        if not self_c:
            self_c = self_collision(robot, q) and _member_b_self(robot, q)
        if env and self_c:
            break
    return env, self_c


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutConfig:
    dt: float = DEFAULT_DT
    horizon: float = ROLLOUT_HORIZON
    cloud_budget: tuple = (2048, 1024, 128)
    seed: int = 0
    partial_view: bool = False    # observe via a single rendered depth view
    cloud_noise: float = 0.0      # m, Gaussian perturbation of cloud points


def make_dynamic_scene_fn(problem, speed, rng, block_half=0.04):
    """Adds a block orbiting near the target on a periodic x/y curve.

    The x and y periods are incommensurate so the path never repeats within
    the horizon.  `speed` is the peak speed in m/s.
    """
    base = problem.scene
    center = problem.target.translation + np.array([0.0, 0.0, 0.12])
    amp = 0.15
    # incommensurate angular rates with the requested peak speed
    w1 = speed / amp
    w2 = w1 * np.sqrt(2.0)
    phase = rng.uniform(0.0, 2 * np.pi, size=2)

    def scene_fn(t):
        offset = np.array([amp * np.sin(w1 * t + phase[0]),
                           amp * np.sin(w2 * t + phase[1]), 0.0])
        block = Primitive("box", Pose(np.eye(3), center + offset, check=False),
                          np.full(3, block_half))
        return Scene(base.primitives + [block], base.env_kind,
                     base.goal_volumes, base.rng_seed)

    return scene_fn


def _volume_flags(problem, p_final):
    if problem.target_volume_id is None or not problem.scene.goal_volumes:
        # revised-goal problems carry no volume label; only pose gates apply
        return True, False
    correct = False
    wrong = False
    for vol in problem.scene.goal_volumes:
        inside = vol.contains(p_final)
        if vol.label == problem.target_volume_id:
            correct = bool(inside)
        elif inside:
            wrong = True
    return correct, wrong


def rollout(params, problem, robot, config=None, scene_fn=None):
    """Closed-loop policy execution until the target or the time budget.

    Observation clouds use zero input noise; each step's cloud RNG is
    counter-derived from (config.seed, step) so constant-scene rollouts are
    deterministic.
    """
    config = RolloutConfig() if config is None else config
    static_scene = problem.scene
    if scene_fn is None:
        scene_fn = lambda t: static_scene
    budget = int(np.ceil(config.horizon / config.dt))
    target_p = problem.target.translation
    q = np.asarray(problem.start, dtype=float)
    configs = [q.copy()]
    terminated = "step_budget"
    t0 = time.perf_counter()
    for step in range(budget):
        p_ee = rb.fk_link_matrices(robot, q)[-1, :3, 3]
        if np.linalg.norm(p_ee - target_p) <= POS_THRESHOLD:
            terminated = "target_reached"
            break
        scene_t = scene_fn(step * config.dt)
        ex = TrainingExample(scene_t, q, q, problem.target)
        step_rng = np.random.default_rng([config.seed, step])
        obs_pts = None
        if config.partial_view:
            from .errors import EmptyView
            from .render import default_camera_pose, render_partial_cloud
            try:
                obs_pts, _ = render_partial_cloud(scene_t, default_camera_pose(),
                                                  config.cloud_budget[0], step_rng)
            except EmptyView:
                obs_pts = None
        cloud, qn = assemble_input(ex, robot, step_rng,
                                   cloud_budget=config.cloud_budget, noise_sigma=0.0,
                                   obstacle_points=obs_pts)
        if config.cloud_noise > 0.0:
            jitter = step_rng.normal(0.0, config.cloud_noise, size=cloud.points.shape)
            cloud.points = cloud.points + jitter
            cloud.features = cloud.features.copy()
            cloud.features[:, 3:6] = cloud.points
        dqn = policy_forward(params, cloud, qn, step_rng)
        q = policy_step(robot, q, dqn)
        configs.append(q.copy())
    else:
        p_ee = rb.fk_link_matrices(robot, q)[-1, :3, 3]
        if np.linalg.norm(p_ee - target_p) <= POS_THRESHOLD:
            terminated = "target_reached"
    wall = time.perf_counter() - t0
    if len(configs) < 2:
        configs.append(configs[0].copy())
    traj = Trajectory(np.asarray(configs), config.dt, "policy", wall)
    return finish_rollout(traj, problem, robot, terminated, wall)


def finish_rollout(traj, problem, robot, terminated, wall):
    """Metric computation shared by live rollouts and expert replays."""
    mat = rb.fk_link_matrices(robot, traj.configs[-1])[-1]
    pos_err = float(np.linalg.norm(mat[:3, 3] - problem.target.translation))
    ori_err = float(orientation_error(mat[:3, :3], problem.target.rotation))
    env_c, self_c = collision_ensemble(traj, problem, robot)
    violation = not all(robot.within_limits(q, tol=1e-9) for q in traj.configs)
    correct, wrong = _volume_flags(problem, mat[:3, 3])
    try:
        sj, se = trajectory_sparc(traj, robot)
    except DegenerateProfile:
        sj = se = 0.0
    return RolloutResult(traj, terminated, pos_err, ori_err, env_c, self_c,
                         violation, correct, wrong, sj, se, wall)


def replay_rollout(traj, problem, robot):
    """Score an existing trajectory as if a policy had produced it."""
    mat = rb.fk_link_matrices(robot, traj.configs[-1])[-1]
    reached = np.linalg.norm(mat[:3, 3] - problem.target.translation) <= POS_THRESHOLD
    terminated = "target_reached" if reached else "step_budget"
    return finish_rollout(traj, problem, robot, terminated, traj.planning_time)


def straight_line_rollout(problem, robot, n_steps=None, dt=DEFAULT_DT):
    """Configuration-space straight line from the start to an IK-free guess.

    The baseline interpolates toward the config minimizing task error along
    the segment endpoints available without planning: it simply drives all
    joints linearly toward the configuration reached by one damped IK solve
    ignoring obstacles; when IK fails the baseline stays at the start.
    """
    from .errors import Unreachable
    rng = np.random.default_rng([problem.problem_id, 99])
    try:
        goal = rb.ik_solve(robot, problem.target, None, rng, max_attempts=50)
    except Unreachable:
        goal = np.asarray(problem.start, dtype=float)
    start = np.asarray(problem.start, dtype=float)
    if n_steps is None:
        n_steps = max(2, int(np.ceil(np.linalg.norm(goal - start) / 0.04)) + 1)
    line = start + np.linspace(0.0, 1.0, n_steps)[:, None] * (goal - start)
    traj = Trajectory(line, dt, "baseline", 0.0)
    return replay_rollout(traj, problem, robot)


def success_check(result, problem=None):
    """Position, orientation, flags, and goal-volume membership conjunction."""
    return bool(result.final_pos_err <= POS_THRESHOLD
                and result.final_ori_err <= ORI_THRESHOLD
                and not result.env_collision
                and not result.self_collision
                and not result.joint_violation
                and result.in_correct_volume
                and not result.in_wrong_volume)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsReport:
    n_problems: int
    n_success: int
    env_collision_rate: float
    self_collision_rate: float
    smooth_rate: float
    pos_err_quantiles: tuple      # (median, p90)
    ori_err_quantiles: tuple
    time_mean: float
    time_std: float

    def __post_init__(self):
        assert 0 <= self.n_success <= self.n_problems
        for r in (self.env_collision_rate, self.self_collision_rate, self.smooth_rate):
            assert 0.0 <= r <= 1.0

    @property
    def success_rate(self):
        return self.n_success / self.n_problems

    def to_dict(self):
        return {"n_problems": self.n_problems, "n_success": self.n_success,
                "success_rate": self.success_rate,
                "env_collision_rate": self.env_collision_rate,
                "self_collision_rate": self.self_collision_rate,
                "smooth_rate": self.smooth_rate,
                "pos_err_quantiles": list(self.pos_err_quantiles),
                "ori_err_quantiles": list(self.ori_err_quantiles),
                "time_mean": self.time_mean, "time_std": self.time_std}

    def table(self):
        rows = [("problems", f"{self.n_problems}"),
                ("success rate", f"{100.0 * self.success_rate:.1f} %"),
                ("env collision", f"{100.0 * self.env_collision_rate:.1f} %"),
                ("self collision", f"{100.0 * self.self_collision_rate:.1f} %"),
                ("smooth (SPARC)", f"{100.0 * self.smooth_rate:.1f} %"),
                ("pos err med/p90", "%.4f / %.4f m" % self.pos_err_quantiles),
                ("ori err med/p90", "%.3f / %.3f rad" % self.ori_err_quantiles),
                ("time mean+-std", f"{self.time_mean:.2f} +- {self.time_std:.2f} s")]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def summarize_results(results, problems):
    assert len(results) == len(problems) and len(results) > 0
    succ = [success_check(r, p) for r, p in zip(results, problems)]
    smooth = [r.sparc_joint < SPARC_THRESHOLD and r.sparc_ee < SPARC_THRESHOLD
              for r in results]
    pos = np.array([r.final_pos_err for r in results])
    ori = np.array([r.final_ori_err for r in results])
    times = np.array([r.wall_time for r, s in zip(results, succ) if s])
    return MetricsReport(
        len(results), int(np.sum(succ)),
        float(np.mean([r.env_collision for r in results])),
        float(np.mean([r.self_collision for r in results])),
        float(np.mean(smooth)),
        (float(np.median(pos)), float(np.quantile(pos, 0.9))),
        (float(np.median(ori)), float(np.quantile(ori, 0.9))),
        float(np.mean(times)) if len(times) else 0.0,
        float(np.std(times)) if len(times) else 0.0)


def evaluate_dataset(params, problems, robot, config=None, scene_fns=None):
    """Rollout every problem and aggregate; order-independent reduction."""
    assert len(problems) > 0
    results = []
    for i, problem in enumerate(problems):
        fn = scene_fns[i] if scene_fns is not None else None
        results.append(rollout(params, problem, robot, config=config, scene_fn=fn))
    return summarize_results(results, problems), results
