"""Procedural environments (tabletop, cubby, dresser) and problem sampling."""

from dataclasses import dataclass

import numpy as np

from . import robot as rb
from .errors import GenerationExhausted, NoValidPair, Unreachable
from .geometry import Pose, frame_from_z, rot_z, sample_cone_direction
from .scene import GoalVolume, Primitive, Scene, config_in_collision, sdf_eval

ENV_KINDS = ("tabletop", "cubby", "dresser")

TARGET_CONE_HALF_ANGLE = np.deg2rad(30.0)
REACH_MIN, REACH_MAX = 0.30, 0.85
BASE_CLEARANCE = 0.28          # fixtures must keep this distance from the base
DRAWER_SPLIT_DECAY = 0.8       # split probability 0.8**depth
DRAWER_MIN_EXTENT = 0.12


@dataclass
class PlanningProblem:
    """Scene + start configuration + task-space target."""

    scene: Scene
    start: np.ndarray
    target: Pose
    target_volume_id: str
    problem_id: int

    def to_dict(self):
        return {
            "problem_id": int(self.problem_id),
            "scene": self.scene.to_dict(),
            "start": self.start.tolist(),
            "target_rotation": self.target.rotation.reshape(-1).tolist(),
            "target_translation": self.target.translation.tolist(),
            "target_volume_id": self.target_volume_id,
        }

    @classmethod
    def from_dict(cls, d):
        target = Pose(np.array(d["target_rotation"]).reshape(3, 3),
                      np.array(d["target_translation"]))
        return cls(Scene.from_dict(d["scene"]), np.array(d["start"], dtype=float),
                   target, d["target_volume_id"], d["problem_id"])

    def with_target(self, target):
        return PlanningProblem(self.scene, self.start, target,
                               self.target_volume_id, self.problem_id)


def _floor():
    return Primitive("floor", Pose(), np.array([1.0]))


def _aabb_box(lo, hi):
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    return Primitive("box", Pose(translation=(lo + hi) / 2.0), (hi - lo) / 2.0)


def _yawed_box(center, half, yaw):
    return Primitive("box", Pose(rot_z(yaw), center), np.asarray(half, dtype=float))


def _world_aabb_of_local_box(lo, hi, yaw, pivot):
    """Axis-aligned bound of a yawed local box (goal volumes stay axis-aligned)."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    R = rot_z(yaw)
    world = (corners - pivot) @ R.T + pivot
    return world.min(axis=0), world.max(axis=0)


# ---------------------------------------------------------------------------
# Tabletop
# ---------------------------------------------------------------------------

def _generate_tabletop(rng, seed):
    prims = [_floor()]
    h = rng.uniform(0.0, 0.40)
    depth = rng.uniform(0.90, 1.10)
    width = rng.uniform(2.05, 2.40)
    x_min = rng.uniform(0.18, 0.35)
    x_max = x_min + depth
    yc = rng.uniform(-0.2, 0.2)
    y_min, y_max = yc - width / 2.0, yc + width / 2.0
    if h >= 0.03:
        prims.append(_aabb_box([x_min, y_min, 0.0], [x_max, y_max, h]))
    if rng.random() < 0.5:
        # L-bend: side table wrapping one side of the robot, clear of the base
        side_depth = rng.uniform(0.90, 2.475)
        side_width = rng.uniform(0.425, 0.725)
        side = 1.0 if rng.random() < 0.5 else -1.0
        y_near = side * 0.30
        lo_y = min(y_near, y_near + side * side_depth)
        hi_y = max(y_near, y_near + side * side_depth)
        if h >= 0.03:
            prims.append(_aabb_box([x_min - side_width, lo_y, 0.0], [x_min, hi_y, h]))

    n_obj = int(rng.integers(3, 16))
    for _ in range(n_obj):
        height = rng.uniform(0.05, 0.35)
        for _try in range(50):
            r_ = rng.uniform(REACH_MIN, min(REACH_MAX + 0.25, x_max))
            ang = rng.uniform(-1.0, 1.0)
            p = np.array([r_ * np.cos(ang), r_ * np.sin(ang)])
            if x_min + 0.05 < p[0] < x_max - 0.05 and y_min + 0.05 < p[1] < y_max - 0.05:
                break
        else:
            continue
        if rng.random() < 0.5:
            half = np.array([rng.uniform(0.05, 0.15) / 2.0,
                             rng.uniform(0.05, 0.15) / 2.0, height / 2.0])
            prims.append(_yawed_box([p[0], p[1], h + height / 2.0], half,
                                    rng.uniform(-np.pi, np.pi)))
        else:
            radius = rng.uniform(0.05, 0.15)
            prims.append(Primitive("cylinder", Pose(translation=[p[0], p[1], h + height / 2.0]),
                                   np.array([radius, height / 2.0])))

    lo = np.array([max(x_min, 0.32), max(y_min, -0.55), h + 0.03])
    hi = np.array([min(x_max, 0.72), min(y_max, 0.55), h + 0.32])
    if np.any(hi <= lo + 0.05):
        raise GenerationExhausted("tabletop goal region degenerate")
    volumes = [GoalVolume("table", lo, hi, [0.0, 0.0, -1.0])]
    return Scene(prims, "tabletop", volumes, seed)


# ---------------------------------------------------------------------------
# Cubby
# ---------------------------------------------------------------------------

def _generate_cubby(rng, seed):
    W = rng.uniform(1.20, 1.60)
    D = rng.uniform(0.20, 0.35)
    H = rng.uniform(0.30, 0.60)
    t = rng.uniform(0.01, 0.02)
    x0 = rng.uniform(0.42, 0.55)            # front face distance from base
    yc = rng.uniform(-0.10, 0.10)
    zc = rng.uniform(0.35, 0.60)
    yaw = rng.uniform(-np.deg2rad(40.0), np.deg2rad(40.0))
    z0, z1 = zc - H / 2.0, zc + H / 2.0
    y0, y1 = yc - W / 2.0, yc + W / 2.0
    x1 = x0 + D
    pivot = np.array([x0 + D / 2.0, yc, zc])
    # dividers placed within a 20 cm range centered on the fixture midpoint
    yd = yc + rng.uniform(-0.10, 0.10)
    zd = zc + rng.uniform(-0.10, 0.10)

    def lbox(lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        center_local = (lo + hi) / 2.0
        R = rot_z(yaw)
        center = R @ (center_local - pivot) + pivot
        return Primitive("box", Pose(R, center), (hi - lo) / 2.0)

    prims = [_floor()]
    prims.append(lbox([x1, y0, z0], [x1 + t, y1, z1]))              # back
    prims.append(lbox([x0, y0, z1], [x1, y1, z1 + t]))              # top
    prims.append(lbox([x0, y0, z0 - t], [x1, y1, z0]))              # bottom
    prims.append(lbox([x0, y0 - t, z0], [x1, y0, z1]))              # right wall
    prims.append(lbox([x0, y1, z0], [x1, y1 + t, z1]))              # left wall

    # divider segments, removable for hole merging
    seg_vert_low = ([x0, yd - t / 2, z0], [x1, yd + t / 2, zd])
    seg_vert_high = ([x0, yd - t / 2, zd], [x1, yd + t / 2, z1])
    seg_horz_right = ([x0, y0, zd - t / 2], [x1, yd, zd + t / 2])
    seg_horz_left = ([x0, yd, zd - t / 2], [x1, y1, zd + t / 2])
    segments = {"vert_low": seg_vert_low, "vert_high": seg_vert_high,
                "horz_right": seg_horz_right, "horz_left": seg_horz_left}
    # quadrant holes: (label, y-range, z-range) and their separating segment
    holes = {
        "cubby_00": ((y0, yd), (z0, zd)),
        "cubby_01": ((yd, y1), (z0, zd)),
        "cubby_10": ((y0, yd), (zd, z1)),
        "cubby_11": ((yd, y1), (zd, z1)),
    }
    neighbors = {
        "vert_low": ("cubby_00", "cubby_01"),
        "vert_high": ("cubby_10", "cubby_11"),
        "horz_right": ("cubby_00", "cubby_10"),
        "horz_left": ("cubby_01", "cubby_11"),
    }
    merged = None
    if rng.random() < 0.5:
        removed = list(segments)[int(rng.integers(0, 4))]
        merged = neighbors[removed]
        del segments[removed]
    for lo, hi in segments.values():
        prims.append(lbox(lo, hi))

    volumes = []
    consumed = set(merged) if merged else set()
    inset = t + 0.01

    def hole_volume(label, yr, zr):
        lo = [x0 + 0.02, yr[0] + inset, zr[0] + inset]
        hi = [x1 - 0.02, yr[1] - inset, zr[1] - inset]
        wlo, whi = _world_aabb_of_local_box(lo, hi, yaw, pivot)
        return GoalVolume(label, wlo, whi, rot_z(yaw) @ np.array([1.0, 0.0, 0.0]))

    if merged:
        (ya, za), (yb, zb) = holes[merged[0]], holes[merged[1]]
        yr = (min(ya[0], yb[0]), max(ya[1], yb[1]))
        zr = (min(za[0], zb[0]), max(za[1], zb[1]))
        volumes.append(hole_volume("cubby_merged", yr, zr))
    for label, (yr, zr) in holes.items():
        if label in consumed:
            continue
        volumes.append(hole_volume(label, yr, zr))

    scene = Scene(prims, "cubby", volumes, seed)
    _check_fixture_clearance(scene)
    _require_reachable_volume(scene)
    return scene


# ---------------------------------------------------------------------------
# Dresser
# ---------------------------------------------------------------------------

def _split_drawers(rng, rect, depth, out):
    """Recursive binary split with decaying probability; returns leaf rects."""
    (y0, y1), (z0, z1) = rect
    dy, dz = y1 - y0, z1 - z0
    can = []
    if dy >= 2 * DRAWER_MIN_EXTENT:
        can.append("y")
    if dz >= 2 * DRAWER_MIN_EXTENT:
        can.append("z")
    if can and rng.random() < DRAWER_SPLIT_DECAY ** depth:
        d = can[int(rng.integers(0, len(can)))]
        if d == "y":
            cut = rng.uniform(y0 + DRAWER_MIN_EXTENT, y1 - DRAWER_MIN_EXTENT)
            _split_drawers(rng, ((y0, cut), (z0, z1)), depth + 1, out)
            _split_drawers(rng, ((cut, y1), (z0, z1)), depth + 1, out)
        else:
            cut = rng.uniform(z0 + DRAWER_MIN_EXTENT, z1 - DRAWER_MIN_EXTENT)
            _split_drawers(rng, ((y0, y1), (z0, cut)), depth + 1, out)
            _split_drawers(rng, ((y0, y1), (cut, z1)), depth + 1, out)
    else:
        out.append((rect, depth))


T_SIDE = 0.01      # dresser side wall thickness
T_DRAWER = 0.019   # drawer side wall thickness
T_FACE = 0.004     # drawer face thickness


def _generate_dresser(rng, seed):
    W = rng.uniform(0.80, 1.20)
    D = rng.uniform(0.20, 0.40)
    H = rng.uniform(0.55, 0.85)
    x0 = rng.uniform(0.48, 0.62)
    yc = rng.uniform(-0.15, 0.15)
    yaw = rng.uniform(-np.deg2rad(30.0), np.deg2rad(30.0))
    y0, y1 = yc - W / 2.0, yc + W / 2.0
    x1 = x0 + D
    pivot = np.array([x0 + D / 2.0, yc, H / 2.0])

    def lbox(lo, hi):
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        R = rot_z(yaw)
        center = R @ ((lo + hi) / 2.0 - pivot) + pivot
        return Primitive("box", Pose(R, center), (hi - lo) / 2.0)

    prims = [_floor()]
    prims.append(lbox([x1, y0, 0.0], [x1 + T_SIDE, y1, H]))          # back
    prims.append(lbox([x0, y0 - T_SIDE, 0.0], [x1, y0, H]))          # right
    prims.append(lbox([x0, y1, 0.0], [x1, y1 + T_SIDE, H]))          # left
    prims.append(lbox([x0, y0, H], [x1, y1, H + T_SIDE]))            # top

    front = ((y0 + T_SIDE, y1 - T_SIDE), (0.05, H - T_SIDE))
    leaves = []
    _split_drawers(rng, front, 0, leaves)

    reachable = []
    for i, (rect, depth) in enumerate(leaves):
        (ry0, ry1), (rz0, rz1) = rect
        c_local = np.array([x0, (ry0 + ry1) / 2.0, (rz0 + rz1) / 2.0])
        c = rot_z(yaw) @ (c_local - pivot) + pivot
        if REACH_MIN < np.linalg.norm(c) < REACH_MAX and 0.12 < c[2] < 0.80:
            reachable.append(i)
    if len(reachable) < 2:
        raise GenerationExhausted("fewer than two reachable drawers")
    open_ids = rng.choice(np.array(reachable), size=2, replace=False)

    volumes = []
    depths = []
    for i, (rect, depth) in enumerate(leaves):
        (ry0, ry1), (rz0, rz1) = rect
        depths.append(depth)
        if i not in open_ids:
            prims.append(lbox([x0 - T_FACE, ry0, rz0], [x0, ry1, rz1]))
            continue
        # open drawer: pulled-out open-top box in front of its hole
        pull = min(0.25, D * 0.8)
        wall_h = min(rz1 - rz0, 0.18)
        zb = rz0
        prims.append(lbox([x0 - pull - T_FACE, ry0, zb], [x0 - pull, ry1, rz1]))       # face
        prims.append(lbox([x0 - pull, ry0, zb], [x0 + 0.02, ry1, zb + T_DRAWER]))      # bottom
        prims.append(lbox([x0 - pull, ry0, zb], [x0 + 0.02, ry0 + T_DRAWER, zb + wall_h]))
        prims.append(lbox([x0 - pull, ry1 - T_DRAWER, zb], [x0 + 0.02, ry1, zb + wall_h]))
        lo = [x0 - pull + 0.03, ry0 + T_DRAWER + 0.01, zb + T_DRAWER + 0.01]
        hi = [x0 - 0.02, ry1 - T_DRAWER - 0.01, zb + max(wall_h, 0.12) + 0.10]
        if np.any(np.asarray(hi) <= np.asarray(lo)):
            raise GenerationExhausted("degenerate drawer volume")
        wlo, whi = _world_aabb_of_local_box(lo, hi, yaw, pivot)
        volumes.append(GoalVolume(f"drawer_{i}", wlo, whi, [0.0, 0.0, -1.0]))

    scene = Scene(prims, "dresser", volumes, seed)
    scene.drawer_depths = depths   # recursion metadata for distribution checks
    _check_fixture_clearance(scene)
    _require_reachable_volume(scene)
    return scene


def _check_fixture_clearance(scene):
    fixture = Scene([p for p in scene.primitives if p.kind != "floor"], scene.env_kind)
    d = sdf_eval(fixture, np.array([[0.0, 0.0, 0.15], [0.0, 0.0, 0.45]]))
    if np.min(d) < BASE_CLEARANCE:
        raise GenerationExhausted("fixture too close to the robot base")


def _require_reachable_volume(scene):
    for v in scene.goal_volumes:
        c = (v.lo + v.hi) / 2.0
        if REACH_MIN - 0.05 < np.linalg.norm(c) < REACH_MAX + 0.05:
            return
    raise GenerationExhausted("no reachable goal volume")


_GENERATORS = {"tabletop": _generate_tabletop, "cubby": _generate_cubby,
               "dresser": _generate_dresser}


def generate_scene(kind, rng, max_rounds=100):
    """Procedural scene of the given kind; pure function of the rng state."""
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment kind: {kind}")
    seed = int(rng.integers(0, 2 ** 63 - 1))
    sub = np.random.default_rng(seed)
    for _ in range(max_rounds):
        try:
            return _GENERATORS[kind](sub, seed)
        except GenerationExhausted:
            continue
    raise GenerationExhausted(f"could not generate a valid {kind} scene")


# ---------------------------------------------------------------------------
# Problem sampling
# ---------------------------------------------------------------------------

def _sample_target_in_volume(scene, volume, rng, tries=40):
    for _ in range(tries):
        p = volume.sample(rng, margin=0.02)
        r = np.linalg.norm(p)
        if not (REACH_MIN < r < REACH_MAX):
            continue
        if sdf_eval(scene, p) < 0.04:
            continue
        z_axis = sample_cone_direction(rng, volume.approach_dir, TARGET_CONE_HALF_ANGLE)
        R = frame_from_z(z_axis, rng=rng)
        return Pose(R, p)
    return None


def _sample_neutral_start(robot, scene, rng, tries=40):
    for _ in range(tries):
        q = robot.clamp(robot.neutral + rng.uniform(-0.35, 0.35, size=7))
        if not config_in_collision(robot, q, scene):
            return q
    return None


def sample_problem(scene, robot, rng, problem_id=0, max_attempts=40, ik_attempts=30):
    """Draw a (start, target) planning problem for a scene.

    The target is a collision-free-IK-reachable pose inside a goal volume
    with the kind-appropriate orientation cone; the start is either a
    perturbed neutral configuration or an IK solution for a target in a
    different volume.
    """
    if not scene.goal_volumes:
        raise NoValidPair("scene has no goal volumes")
    for _ in range(max_attempts):
        vol = scene.goal_volumes[int(rng.integers(0, len(scene.goal_volumes)))]
        target = _sample_target_in_volume(scene, vol, rng)
        if target is None:
            continue
        try:
            ik_solve_check = rb.ik_solve(robot, target, scene, rng, max_attempts=ik_attempts)
        except Unreachable:
            continue
        del ik_solve_check
        start = None
        other = [v for v in scene.goal_volumes if v.label != vol.label]
        if other and rng.random() < 0.5:
            svol = other[int(rng.integers(0, len(other)))]
            st = _sample_target_in_volume(scene, svol, rng)
            if st is not None:
                try:
                    start = rb.ik_solve(robot, st, scene, rng, max_attempts=ik_attempts)
                except Unreachable:
                    start = None
        if start is None:
            start = _sample_neutral_start(robot, scene, rng)
        if start is None:
            continue
        return PlanningProblem(scene, start, target, vol.label, problem_id)
    raise NoValidPair("no valid start/target pair found")
