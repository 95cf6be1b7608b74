"""Global expert: IK, bidirectional c-space search, collision-aware smoothing.

All stages run on deterministic iteration budgets derived from the nominal
timeout, so identical (problem, seed, timeout) always yields an identical
trajectory regardless of machine speed.  Recorded planning_time is the
consumed work budget converted to nominal seconds.
"""

import numpy as np

from . import robot as rb
from .errors import IkFailed, SearchTimeout, Unreachable, ValidationFailed
from .scene import configs_in_collision
from .trajectory import DEFAULT_DT, Trajectory, retime_constant_speed, validate_trajectory

RRT_STEP = 0.15                 # c-space extension step, rad
EDGE_RESOLUTION = 0.02          # planner edge check spacing, rad
SHORTCUT_RESOLUTION = 0.01     # smoothing check spacing, rad
GOAL_BIAS = 0.10
PLAN_MARGIN = 0.0               # collision margin during search, m
ITERS_PER_SECOND = 2000.0       # nominal work rate: budget = timeout * rate
REFINE_ROUNDS = 150
SHORTCUT_ROUNDS = 120
OPTIMIZE_FRACTION = 0.75        # share of the remaining budget spent optimizing


class _WorkMeter:
    """Deterministic planner clock: counts elementary work units."""

    def __init__(self, budget):
        self.budget = budget
        self.used = 0

    def charge(self, units=1):
        self.used += units
        return self.used <= self.budget

    @property
    def exhausted(self):
        return self.used > self.budget

    def seconds(self):
        return self.used / ITERS_PER_SECOND


def _segment_configs(qa, qb, resolution):
    dist = np.linalg.norm(qb - qa)
    n = max(2, int(np.ceil(dist / resolution)) + 1)
    return qa + np.linspace(0.0, 1.0, n)[:, None] * (qb - qa)


def segment_collision_free(robot, scene, qa, qb, resolution=EDGE_RESOLUTION, margin=PLAN_MARGIN):
    Q = _segment_configs(np.asarray(qa, float), np.asarray(qb, float), resolution)
    return not bool(np.any(configs_in_collision(robot, Q, scene, margin=margin)))


def _rrt_connect(robot, scene, start, goal, rng, meter):
    """Bidirectional RRT with greedy connect; returns a waypoint path."""
    trees = [{"nodes": [start], "parent": [-1]}, {"nodes": [goal], "parent": [-1]}]

    def nearest(tree, q):
        nodes = np.asarray(tree["nodes"])
        return int(np.argmin(np.linalg.norm(nodes - q, axis=1)))

    def extend(tree, q_target, greedy):
        """Step from the nearest node toward q_target; returns (status, idx)."""
        idx = nearest(tree, q_target)
        q_near = tree["nodes"][idx]
        while True:
            d = np.linalg.norm(q_target - q_near)
            if d < 1e-9:
                return "reached", idx
            q_new = q_target if d <= RRT_STEP else q_near + (q_target - q_near) * (RRT_STEP / d)
            meter.charge(int(np.ceil(np.linalg.norm(q_new - q_near) / EDGE_RESOLUTION)) + 1)
            if not segment_collision_free(robot, scene, q_near, q_new):
                return "trapped", idx
            tree["nodes"].append(q_new)
            tree["parent"].append(idx)
            idx = len(tree["nodes"]) - 1
            q_near = q_new
            if np.linalg.norm(q_target - q_new) < 1e-9:
                return "reached", idx
            if not greedy:
                return "advanced", idx

    def backtrack(tree, idx):
        path = []
        while idx != -1:
            path.append(tree["nodes"][idx])
            idx = tree["parent"][idx]
        return path[::-1]

    a, b = 0, 1
    while not meter.exhausted:
        meter.charge(1)
        sample = goal if (a == 0 and rng.random() < GOAL_BIAS) else robot.random_config(rng)
        status, idx_a = extend(trees[a], sample, greedy=False)
        if status != "trapped":
            q_new = trees[a]["nodes"][idx_a]
            status_b, idx_b = extend(trees[b], q_new, greedy=True)
            if status_b == "reached":
                path_a = backtrack(trees[a], idx_a)
                path_b = backtrack(trees[b], idx_b)
                if a == 1:
                    path_a, path_b = path_b, path_a
                return np.asarray(path_a + path_b[::-1])
        a, b = b, a
    raise SearchTimeout("c-space search budget exhausted")


def _path_length(path):
    return float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))


def _informed_refine(robot, scene, path, rng, meter, rounds=REFINE_ROUNDS):
    """Waypoint replacement restricted to the informed ellipsoid."""
    path = [q for q in path]
    start, goal = path[0], path[-1]
    for _ in range(rounds):
        if meter.exhausted or len(path) < 3:
            break
        meter.charge(1)
        c_best = _path_length(np.asarray(path))
        i = int(rng.integers(1, len(path) - 1))
        q = None
        for _ in range(15):
            cand = robot.random_config(rng)
            if np.linalg.norm(cand - start) + np.linalg.norm(cand - goal) <= c_best:
                q = cand
                break
        if q is None:
            continue
        old = (np.linalg.norm(path[i] - path[i - 1])
               + np.linalg.norm(path[i + 1] - path[i]))
        new = (np.linalg.norm(q - path[i - 1]) + np.linalg.norm(path[i + 1] - q))
        if new >= old:
            continue
        meter.charge(int(np.ceil((new) / EDGE_RESOLUTION)) + 2)
        if (segment_collision_free(robot, scene, path[i - 1], q)
                and segment_collision_free(robot, scene, q, path[i + 1])):
            path[i] = q
    return np.asarray(path)


def _optimize_path(robot, scene, path, rng, meter, budget_units):
    """Anytime path optimization after the first solution.

    Alternates random shortcut attempts with informed sampling rounds until
    the work budget is consumed; there is no cost-target termination, so
    (like the stock timeout-bound anytime optimizers) sampling effort is
    still spent, and charged, after the incumbent path stops improving.
    """
    path = [q.copy() for q in path]
    start, goal = path[0], path[-1]
    stop_at = meter.used + int(budget_units)
    while meter.used < stop_at and not meter.exhausted:
        meter.charge(1)
        if len(path) >= 3 and rng.random() < 0.5:
            # shortcut attempt
            i = int(rng.integers(0, len(path) - 2))
            j = int(rng.integers(i + 2, len(path)))
            direct = np.linalg.norm(path[j] - path[i])
            if direct >= _path_length(np.asarray(path[i:j + 1])) - 1e-12:
                continue
            meter.charge(int(np.ceil(direct / SHORTCUT_RESOLUTION)) + 1)
            if segment_collision_free(robot, scene, path[i], path[j],
                                      resolution=SHORTCUT_RESOLUTION):
                path = path[:i + 1] + path[j:]
        else:
            # informed sampling round: draw a configuration, keep it only if
            # it could shorten the incumbent (lies inside the cost ellipsoid)
            c_best = _path_length(np.asarray(path))
            cand = robot.random_config(rng)
            if np.linalg.norm(cand - start) + np.linalg.norm(cand - goal) > c_best:
                continue
            if len(path) < 3:
                continue
            i = int(rng.integers(1, len(path) - 1))
            old = (np.linalg.norm(path[i] - path[i - 1])
                   + np.linalg.norm(path[i + 1] - path[i]))
            new = (np.linalg.norm(cand - path[i - 1])
                   + np.linalg.norm(path[i + 1] - cand))
            if new >= old:
                continue
            meter.charge(int(np.ceil(new / EDGE_RESOLUTION)) + 2)
            if (segment_collision_free(robot, scene, path[i - 1], cand)
                    and segment_collision_free(robot, scene, cand, path[i + 1])):
                path[i] = cand
    return np.asarray(path)


def smooth_trajectory(traj, scene, robot, rng, rounds=SHORTCUT_ROUNDS, meter=None):
    """Random shortcutting with discrete 1 cm collision checks.

    Endpoints are preserved exactly and the discrete path length never
    increases; the input is returned unchanged when no shortcut verifies.
    """
    path = [q.copy() for q in np.atleast_2d(traj.configs if isinstance(traj, Trajectory)
                                            else np.asarray(traj, dtype=float))]
    for _ in range(rounds):
        if len(path) < 3:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        direct = np.linalg.norm(path[j] - path[i])
        via = _path_length(np.asarray(path[i:j + 1]))
        if direct >= via - 1e-12:
            continue
        if meter is not None:
            meter.charge(int(np.ceil(direct / SHORTCUT_RESOLUTION)) + 1)
        if segment_collision_free(robot, scene, path[i], path[j],
                                  resolution=SHORTCUT_RESOLUTION, margin=0.0):
            path = path[:i + 1] + path[j:]
    out = np.asarray(path)
    if isinstance(traj, Trajectory):
        return Trajectory(out, traj.dt, traj.provenance, traj.planning_time)
    return out


def plan_global(problem, robot, timeout=20.0, rng=None):
    """IK -> bidirectional search -> informed refinement -> smoothing -> retime.

    Raises IkFailed / SearchTimeout / ValidationFailed naming the stage.
    """
    assert timeout > 0
    rng = np.random.default_rng() if rng is None else rng
    meter = _WorkMeter(budget=int(timeout * ITERS_PER_SECOND))
    scene = problem.scene
    try:
        goal = rb.ik_solve(robot, problem.target, scene, rng, max_attempts=1000)
    except Unreachable as e:
        raise IkFailed(str(e)) from e
    start = np.asarray(problem.start, dtype=float)
    if np.linalg.norm(goal - start) < 1e-9:
        return Trajectory(np.vstack([start, goal]), DEFAULT_DT, "global", meter.seconds())
    path = _rrt_connect(robot, scene, start, goal, rng, meter)
    path = _informed_refine(robot, scene, path, rng, meter)
    path = smooth_trajectory(path, scene, robot, rng, meter=meter)
    path = _optimize_path(robot, scene, path, rng, meter,
                          OPTIMIZE_FRACTION * (meter.budget - meter.used))
    for use_spline in (True, False):
        traj = retime_constant_speed(path, dt=DEFAULT_DT, provenance="global",
                                     use_spline=use_spline)
        traj.planning_time = meter.seconds()
        report = validate_trajectory(traj, problem, robot)
        if report.verdict:
            return traj
    raise ValidationFailed(
        f"collision_free={report.collision_free} within_limits={report.within_limits} "
        f"max_jerk={report.max_jerk:.1f} divergence={report.divergence:.4f}")
