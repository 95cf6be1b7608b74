"""Hybrid expert: task-space gripper search, waypoint-following controller,
steady-velocity retiming, and hindsight goal revision."""

from dataclasses import dataclass, field

import numpy as np

from . import robot as rb
from .errors import SearchTimeout, Stuck, ValidationFailed
from .geometry import Pose, rotation_log, slerp
from .robot import GRIPPER_PROXY_SPHERES
from .scene import config_in_collision, sdf_eval, sdf_grad
from .trajectory import (DEFAULT_DT, Trajectory, retime_constant_speed,
                         validate_trajectory)

WAYPOINT_SPACING = 0.02         # max translation gap between consecutive poses
WAYPOINT_RADIUS = 0.03          # advance when EE within this distance
STALL_LIMIT = 300               # controller steps without waypoint progress
CONTROL_DT = 0.02

# fabric-like controller gains
ATTRACT_STIFFNESS = 60.0        # 1/s^2
ORI_STIFFNESS = 20.0
DAMPING = 2.0 * np.sqrt(ATTRACT_STIFFNESS)
REPULSE_RANGE = 0.10            # m, SDF distance at which repulsion activates
REPULSE_GAIN = 80.0
LIMIT_MARGIN = 0.10             # rad
LIMIT_GAIN = 40.0

EE_RRT_STEP = 0.05
EE_BOUNDS_LO = np.array([-1.1, -1.1, 0.02])
EE_BOUNDS_HI = np.array([1.1, 1.1, 1.25])
EE_CLEARANCE = 0.03
EE_ITERS_PER_SECOND = 2000.0
WORK_RATE = 400.0               # nominal seconds = work units / rate


@dataclass
class EePath:
    """Dense end-effector waypoints (<= 2 cm translation spacing)."""

    poses: list

    def __post_init__(self):
        assert len(self.poses) >= 2
        gaps = [np.linalg.norm(self.poses[i + 1].translation - self.poses[i].translation)
                for i in range(len(self.poses) - 1)]
        assert all(g <= WAYPOINT_SPACING + 1e-9 for g in gaps)

    def __len__(self):
        return len(self.poses)


@dataclass
class ControllerState:
    q: np.ndarray
    q_dot: np.ndarray = field(default_factory=lambda: np.zeros(7))
    waypoint_index: int = 0


def _proxy_centers(pose):
    offs = np.array([o for o, _ in GRIPPER_PROXY_SPHERES])
    return pose.apply(offs)


_PROXY_RADII = np.array([r for _, r in GRIPPER_PROXY_SPHERES])


def gripper_proxy_in_collision(scene, pose, margin=0.0):
    d = sdf_eval(scene, _proxy_centers(pose))
    return bool(np.any(d < _PROXY_RADII + margin))


def _repair_pose(scene, pose, max_push=0.12, iters=12):
    """Push a pose along the SDF gradient until the proxy clears."""
    p = pose
    for _ in range(iters):
        if not gripper_proxy_in_collision(scene, p):
            return p
        centers = _proxy_centers(p)
        d = sdf_eval(scene, centers)
        worst = int(np.argmin(d - _PROXY_RADII))
        g = sdf_grad(scene, centers[worst])[0]
        push = min(max_push / iters, float(_PROXY_RADII[worst] - d[worst]) + 0.005)
        p = Pose(p.rotation, p.translation + push * g, check=False)
    return p if not gripper_proxy_in_collision(scene, p) else None


def _position_rrt(scene, start, goal, rng, budget):
    """RRT-connect over gripper positions with SDF clearance."""

    def point_free(p):
        return sdf_eval(scene, p) > EE_CLEARANCE

    def seg_free(a, b):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.01)) + 1)
        pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        return bool(np.all(sdf_eval(scene, pts) > EE_CLEARANCE))

    trees = [{"nodes": [start], "parent": [-1]}, {"nodes": [goal], "parent": [-1]}]
    used = 0

    def nearest(tree, p):
        return int(np.argmin(np.linalg.norm(np.asarray(tree["nodes"]) - p, axis=1)))

    def extend(tree, target, greedy):
        idx = nearest(tree, target)
        p = tree["nodes"][idx]
        while True:
            d = np.linalg.norm(target - p)
            if d < 1e-9:
                return "reached", idx
            p_new = target if d <= EE_RRT_STEP else p + (target - p) * (EE_RRT_STEP / d)
            # segments touching the endpoints may hug surfaces
            near_end = (np.linalg.norm(p_new - start) < 0.12
                        or np.linalg.norm(p_new - goal) < 0.12)
            ok = seg_free(p, p_new) if not near_end else bool(
                np.all(sdf_eval(scene, np.vstack([p, p_new])) > 0.0))
            if not ok:
                return "trapped", idx
            tree["nodes"].append(p_new)
            tree["parent"].append(idx)
            idx = len(tree["nodes"]) - 1
            p = p_new
            if np.linalg.norm(target - p) < 1e-9:
                return "reached", idx
            if not greedy:
                return "advanced", idx

    def backtrack(tree, idx):
        out = []
        while idx != -1:
            out.append(tree["nodes"][idx])
            idx = tree["parent"][idx]
        return out[::-1]

    a, b = 0, 1
    while used < budget:
        used += 1
        sample = goal if rng.random() < 0.1 else rng.uniform(EE_BOUNDS_LO, EE_BOUNDS_HI)
        status, ia = extend(trees[a], sample, greedy=False)
        if status != "trapped":
            status_b, ib = extend(trees[b], trees[a]["nodes"][ia], greedy=True)
            if status_b == "reached":
                pa, pb = backtrack(trees[a], ia), backtrack(trees[b], ib)
                if a == 1:
                    pa, pb = pb, pa
                return pa + pb[::-1], used
        a, b = b, a
    raise SearchTimeout("task-space search budget exhausted")


def _shortcut_positions(scene, path, rng, rounds=80):
    def seg_free(a, b):
        n = max(2, int(np.ceil(np.linalg.norm(b - a) / 0.01)) + 1)
        pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
        return bool(np.all(sdf_eval(scene, pts) > EE_CLEARANCE))

    path = list(path)
    for _ in range(rounds):
        if len(path) < 3:
            break
        i = int(rng.integers(0, len(path) - 2))
        j = int(rng.integers(i + 2, len(path)))
        if seg_free(path[i], path[j]):
            path = path[:i + 1] + path[j:]
    return path


def plan_ee_path(problem, rng, timeout=2.0, robot=None, start_pose=None):
    """Collision-free dense end-effector path for the floating gripper.

    Orientation is interpolated geodesically from the start EE orientation
    to the target orientation along the densified path.
    """
    assert timeout > 0
    robot = rb.default_robot() if robot is None else robot
    scene = problem.scene
    if start_pose is None:
        start_pose = Pose.from_matrix(rb.fk_link_matrices(robot, problem.start)[-1], check=False)
    target = problem.target
    budget = int(timeout * EE_ITERS_PER_SECOND)
    positions, used = _position_rrt(scene, start_pose.translation.copy(),
                                    target.translation.copy(), rng, budget)
    positions = _shortcut_positions(scene, positions, rng)
    # densify with slerp orientations at <= 2 cm spacing
    seg = np.linalg.norm(np.diff(np.asarray(positions), axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    n = max(2, int(np.ceil(total / WAYPOINT_SPACING)) + 1)
    targets = np.linspace(0.0, total, n)
    pts = np.empty((n, 3))
    for k in range(3):
        pts[:, k] = np.interp(targets, arc, np.asarray(positions)[:, k])
    poses = []
    for i in range(n):
        s = targets[i] / total if total > 0 else 1.0
        R = slerp(start_pose.rotation, target.rotation, s)
        pose = Pose(R, pts[i], check=False)
        if gripper_proxy_in_collision(scene, pose):
            pose = _repair_pose(scene, pose)
            if pose is None:
                # drop irreparable interior waypoints; respacing refills the gap
                if 0 < i < n - 1:
                    continue
                raise SearchTimeout("endpoint pose proxy cannot be cleared")
        poses.append(pose)
    if len(poses) < 2:
        raise SearchTimeout("too few clear waypoints after repair")
    poses[-1] = Pose(target.rotation, target.translation, check=False)
    path = EePath(_respace(poses))
    path.work_units = used
    return path


def _respace(poses):
    """Re-enforce the 2 cm spacing invariant after local repairs."""
    out = [poses[0]]
    for p in poses[1:]:
        prev = out[-1]
        gap = np.linalg.norm(p.translation - prev.translation)
        if gap > WAYPOINT_SPACING:
            m = int(np.ceil(gap / WAYPOINT_SPACING))
            for k in range(1, m):
                s = k / m
                out.append(Pose(slerp(prev.rotation, p.rotation, s),
                                prev.translation + s * (p.translation - prev.translation),
                                check=False))
        out.append(p)
    return out


def fabric_step(state, target_pose, scene, robot, dt=CONTROL_DT):
    """One deterministic step of the waypoint-following local controller.

    Task-space attractor pulled back through the Jacobian, SDF repulsion on
    the collision spheres, joint-limit barrier, and critical damping;
    semi-implicit Euler integration.
    """
    assert dt > 0
    q = np.asarray(state.q, dtype=float)
    mats = rb.fk_link_matrices(robot, q)
    p_ee, R_ee = mats[-1, :3, 3], mats[-1, :3, :3]
    J = rb.jacobian(robot, q)
    e_pos = target_pose.translation - p_ee
    e_ori = rotation_log(target_pose.rotation @ R_ee.T)
    qdd = J[:3].T @ (ATTRACT_STIFFNESS * e_pos) + J[3:].T @ (ORI_STIFFNESS * e_ori)

    if scene is not None and scene.primitives:
        centers = rb.sphere_centers(robot, q)
        d = sdf_eval(scene, centers) - robot.sphere_radius
        close = d < REPULSE_RANGE
        if np.any(close):
            grads = sdf_grad(scene, centers[close])
            # quadratic taper: strong at contact, negligible at range edge
            mags = REPULSE_GAIN * (REPULSE_RANGE - d[close]) ** 2 / REPULSE_RANGE
            Jp = rb.point_jacobians(robot, q, centers[close],
                                    robot.sphere_link[np.flatnonzero(close)])
            qdd = qdd + np.einsum("nij,ni->j", Jp, grads * mags[:, None])

    lo_gap = q - robot.limits[:, 0]
    hi_gap = robot.limits[:, 1] - q
    qdd = qdd + LIMIT_GAIN * np.maximum(LIMIT_MARGIN - lo_gap, 0.0)
    qdd = qdd - LIMIT_GAIN * np.maximum(LIMIT_MARGIN - hi_gap, 0.0)
    qdd = qdd - DAMPING * state.q_dot

    q_dot = state.q_dot + dt * qdd
    q_new = robot.clamp(q + dt * q_dot)
    return ControllerState(q_new, q_dot, state.waypoint_index)


def follow_and_retime(path, start, scene, robot, dt=DEFAULT_DT):
    """Run the controller along the waypoints, then retime to steady speed.

    Raises Stuck when waypoint progress stalls for STALL_LIMIT steps.
    """
    state = ControllerState(np.asarray(start, dtype=float))
    visited = [state.q.copy()]
    stall = 0
    work = 0
    final = path.poses[-1]
    while state.waypoint_index < len(path):
        wp = path.poses[state.waypoint_index]
        state = fabric_step(state, wp, scene, robot)
        work += 1
        visited.append(state.q.copy())
        p_ee = rb.fk_link_matrices(robot, state.q)[-1, :3, 3]
        last = state.waypoint_index == len(path) - 1
        radius = 0.012 if last else WAYPOINT_RADIUS
        if np.linalg.norm(p_ee - wp.translation) <= radius:
            # skip every waypoint already inside the acceptance radius
            idx = state.waypoint_index + 1
            while (idx < len(path) - 1
                   and np.linalg.norm(p_ee - path.poses[idx].translation) <= WAYPOINT_RADIUS):
                idx += 1
            state.waypoint_index = idx
            stall = 0
        elif (not last and stall > STALL_LIMIT // 2
              and np.linalg.norm(p_ee - wp.translation) < 1.5 * REPULSE_RANGE):
            # obstacle-repulsion equilibrium near the waypoint: skip ahead
            state.waypoint_index += 1
            stall = 0
        else:
            stall += 1
            if stall > STALL_LIMIT:
                if last and np.linalg.norm(p_ee - final.translation) < REPULSE_RANGE:
                    break   # settled near the goal; goal revision absorbs the residual
                raise Stuck(f"no waypoint progress for {STALL_LIMIT} steps")
    traj = retime_constant_speed(np.asarray(visited), dt=dt, provenance="hybrid")
    traj.planning_time = work / WORK_RATE
    traj.visited = np.asarray(visited)   # raw controller states, for fallback retiming
    return traj


def hindsight_goal_revision(traj, robot):
    """Target pose equal to the FK end-effector pose of the final config."""
    mat = rb.fk_link_matrices(robot, traj.configs[-1])[-1]
    return Pose.from_matrix(mat, check=False)


def plan_hybrid(problem, robot, timeout=2.0, rng=None):
    """Full hybrid pipeline; returns (trajectory, revised_problem)."""
    rng = np.random.default_rng() if rng is None else rng
    if config_in_collision(robot, problem.start, problem.scene):
        raise ValidationFailed("start configuration in collision")
    attempts = 3
    waiting = 0.0
    for k in range(attempts):
        path = plan_ee_path(problem, rng, timeout=timeout, robot=robot)
        try:
            traj = follow_and_retime(path, problem.start, problem.scene, robot)
            break
        except Stuck:
            # a different gripper path often clears the blockage
            waiting += getattr(path, "work_units", 0) / WORK_RATE
            if k == attempts - 1:
                raise
    traj.planning_time += waiting + getattr(path, "work_units", 0) / WORK_RATE
    revised = problem.with_target(hindsight_goal_revision(traj, robot))
    report = validate_trajectory(traj, revised, robot)
    if not report.verdict:
        raw = getattr(traj, "visited", traj.configs)
        pt = traj.planning_time
        traj = retime_constant_speed(raw, dt=traj.dt, provenance="hybrid",
                                     use_spline=False)
        traj.planning_time = pt
        revised = problem.with_target(hindsight_goal_revision(traj, robot))
        report = validate_trajectory(traj, revised, robot)
        if not report.verdict:
            raise ValidationFailed(
                f"collision_free={report.collision_free} within_limits={report.within_limits} "
                f"max_jerk={report.max_jerk:.1f}")
    return traj, revised
