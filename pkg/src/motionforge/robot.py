"""7-DOF serial manipulator model: FK, surface points, Jacobian, numerical IK.

The robot is described by a data file (see ``save_robot`` / ``load_robot``):
per-joint fixed transforms + rotation axes, joint limits, collision spheres,
and 1024 fixed surface anchor points used by the geometric loss.
"""

import importlib.resources
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import Unreachable, VersionMismatch
from .geometry import Pose, rotation_about_axis, rotation_log, geodesic_angle

ROBOT_FORMAT_VERSION = 1
NUM_JOINTS = 7
NUM_SURFACE_ANCHORS = 1024

# IK settings (numerical damped least squares; see module docs)
IK_POS_TOL = 1e-3
IK_ORI_TOL = 1e-2
IK_DAMPING = 1e-2
IK_MAX_ITERS = 200
IK_MAX_ATTEMPTS = 1000


@dataclass
class RobotModel:
    """Kinematic chain with collision spheres and fixed surface anchors.

    ``fixed_transforms`` has 8 entries: one per joint (applied before the
    joint rotation) plus the final end-effector transform.  Collision
    spheres and anchors reference link indices 0..7 where link i is the
    frame after joint i+1 and link 7 is the end effector.
    """

    fixed_transforms: np.ndarray       # (8, 4, 4)
    axes: np.ndarray                   # (7, 3) unit rotation axes, local frame
    limits: np.ndarray                 # (7, 2) lower/upper, radians
    neutral: np.ndarray                # (7,) seed neutral configuration
    sphere_link: np.ndarray            # (S,) int link index per collision sphere
    sphere_local: np.ndarray           # (S, 3) center offsets, link frame
    sphere_radius: np.ndarray          # (S,)
    anchor_link: np.ndarray            # (1024,) int
    anchor_local: np.ndarray           # (1024, 3)
    name: str = "robot"
    self_pairs: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        assert self.axes.shape == (NUM_JOINTS, 3)
        assert self.limits.shape == (NUM_JOINTS, 2)
        assert np.all(self.limits[:, 0] < self.limits[:, 1])
        assert len(self.anchor_link) == NUM_SURFACE_ANCHORS
        assert np.all(self.sphere_radius > 0)
        if self.self_pairs is None:
            self.self_pairs = self._build_self_pairs()

    # link pairs that share the wrist cluster and touch by construction
    _ADJACENT_EXEMPT = {(3, 6), (4, 7)}

    def _build_self_pairs(self):
        """Sphere index pairs on links far enough apart to self-collide."""
        pairs = []
        for a in range(len(self.sphere_link)):
            for b in range(a + 1, len(self.sphere_link)):
                la, lb = int(self.sphere_link[a]), int(self.sphere_link[b])
                if abs(la - lb) >= 3 and (min(la, lb), max(la, lb)) not in self._ADJACENT_EXEMPT:
                    pairs.append((a, b))
        return np.array(pairs, dtype=int) if pairs else np.zeros((0, 2), dtype=int)

    @property
    def num_links(self):
        return NUM_JOINTS + 1

    def clamp(self, q):
        return np.clip(np.asarray(q, dtype=float), self.limits[:, 0], self.limits[:, 1])

    def within_limits(self, q, tol=0.0):
        q = np.asarray(q, dtype=float)
        return bool(np.all(q >= self.limits[:, 0] - tol) and np.all(q <= self.limits[:, 1] + tol))

    def random_config(self, rng):
        return rng.uniform(self.limits[:, 0], self.limits[:, 1])


def fk_link_matrices(robot, q):
    """(8,4,4) stack of link pose matrices; end effector last."""
    q = np.asarray(q, dtype=float)
    out = np.empty((NUM_JOINTS + 1, 4, 4))
    T = robot.fixed_transforms[0].copy()
    for i in range(NUM_JOINTS):
        if i:
            T = T @ robot.fixed_transforms[i]
        T = T.copy()
        T[:3, :3] = T[:3, :3] @ rotation_about_axis(robot.axes[i], q[i])
        out[i] = T
    out[NUM_JOINTS] = T @ robot.fixed_transforms[NUM_JOINTS]
    return out


def forward_kinematics(robot, q):
    """Link poses for configuration q; end-effector pose is last."""
    return [Pose.from_matrix(T, check=False) for T in fk_link_matrices(robot, q)]


def fk_batch(robot, Q):
    """Vectorized link poses for a batch of configs: (M,8,4,4)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    M = Q.shape[0]
    out = np.empty((M, NUM_JOINTS + 1, 4, 4))
    T = np.broadcast_to(np.eye(4), (M, 4, 4)).copy()
    for i in range(NUM_JOINTS):
        T = T @ robot.fixed_transforms[i]
        c, s = np.cos(Q[:, i]), np.sin(Q[:, i])
        x, y, z = robot.axes[i]
        C = 1.0 - c
        R = np.empty((M, 3, 3))
        R[:, 0, 0] = c + x * x * C
        R[:, 0, 1] = x * y * C - z * s
        R[:, 0, 2] = x * z * C + y * s
        R[:, 1, 0] = y * x * C + z * s
        R[:, 1, 1] = c + y * y * C
        R[:, 1, 2] = y * z * C - x * s
        R[:, 2, 0] = z * x * C - y * s
        R[:, 2, 1] = z * y * C + x * s
        R[:, 2, 2] = c + z * z * C
        T = T.copy()
        T[:, :3, :3] = T[:, :3, :3] @ R
        out[:, i] = T
    out[:, NUM_JOINTS] = T @ robot.fixed_transforms[NUM_JOINTS]
    return out


def surface_points(robot, q):
    """The 1024 fixed robot-surface points at configuration q, fixed order."""
    mats = fk_link_matrices(robot, q)
    R = mats[robot.anchor_link, :3, :3]
    t = mats[robot.anchor_link, :3, 3]
    return np.einsum("nij,nj->ni", R, robot.anchor_local) + t


def sphere_centers(robot, q):
    """World-frame collision sphere centers at q."""
    mats = fk_link_matrices(robot, q)
    R = mats[robot.sphere_link, :3, :3]
    t = mats[robot.sphere_link, :3, 3]
    return np.einsum("nij,nj->ni", R, robot.sphere_local) + t


def sphere_centers_batch(robot, Q):
    mats = fk_batch(robot, Q)[:, robot.sphere_link]    # (M,S,4,4)
    R = mats[:, :, :3, :3]
    t = mats[:, :, :3, 3]
    return np.einsum("msij,sj->msi", R, robot.sphere_local) + t


def joint_frames(robot, q):
    """World axis direction and origin of each joint: (7,3), (7,3)."""
    mats = fk_link_matrices(robot, q)
    axes = np.einsum("jik,jk->ji", mats[:NUM_JOINTS, :3, :3], robot.axes)
    origins = mats[:NUM_JOINTS, :3, 3]
    return axes, origins


def jacobian(robot, q):
    """6x7 geometric Jacobian of the end effector (linear rows first)."""
    mats = fk_link_matrices(robot, q)
    axes, origins = joint_frames(robot, q)
    p_ee = mats[-1, :3, 3]
    J = np.zeros((6, NUM_JOINTS))
    J[:3] = np.cross(axes, p_ee - origins).T
    J[3:] = axes.T
    return J


def point_jacobians(robot, q, points, links):
    """Positional Jacobians (N,3,7) of world points attached to given links.

    Column j of point i is axis_j x (p_i - o_j) when joint j moves link
    ``links[i]`` (j <= links[i]), else zero.
    """
    axes, origins = joint_frames(robot, q)
    points = np.asarray(points, dtype=float)
    N = points.shape[0]
    rel = points[:, None, :] - origins[None, :, :]            # (N,7,3)
    Jp = np.cross(np.broadcast_to(axes, (N, NUM_JOINTS, 3)), rel)
    mask = (np.arange(NUM_JOINTS)[None, :] <= np.asarray(links)[:, None])
    Jp = Jp * mask[:, :, None]
    return np.transpose(Jp, (0, 2, 1))                        # (N,3,7)


def surface_point_jacobians(robot, q):
    pts = surface_points(robot, q)
    return pts, point_jacobians(robot, q, pts, robot.anchor_link)


def normalize_config(robot, q):
    """Map joint angles to per-joint [-1, 1] coordinates (affine, unclamped)."""
    q = np.asarray(q, dtype=float)
    lo, hi = robot.limits[:, 0], robot.limits[:, 1]
    return 2.0 * (q - lo) / (hi - lo) - 1.0


def unnormalize_config(robot, qn):
    """Inverse of normalize_config; input is clamped to [-1, 1] first."""
    qn = np.clip(np.asarray(qn, dtype=float), -1.0, 1.0)
    lo, hi = robot.limits[:, 0], robot.limits[:, 1]
    return lo + (qn + 1.0) * (hi - lo) / 2.0


def pose_error(current, target):
    """6-vector task error: position difference + orientation rotvec."""
    dp = target.translation - current.translation
    dw = rotation_log(target.rotation @ current.rotation.T)
    return np.concatenate([dp, dw])


def ik_solve(robot, target, scene, rng, max_attempts=IK_MAX_ATTEMPTS):
    """Damped-least-squares IK with random in-limit restarts.

    Success requires FK within 1e-3 m / 1e-2 rad of the target, joint
    limits respected, and (when a scene is given) a collision-free
    configuration.  Raises Unreachable when all attempts are exhausted.
    """
    from .scene import config_in_collision

    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    lam2 = np.eye(6) * IK_DAMPING ** 2
    Rt, pt = target.rotation, target.translation
    for _ in range(max_attempts):
        q = robot.random_config(rng)
        best = np.inf
        stall = 0
        for _ in range(IK_MAX_ITERS):
            mats = fk_link_matrices(robot, q)
            R, p = mats[-1, :3, :3], mats[-1, :3, 3]
            err = np.empty(6)
            err[:3] = pt - p
            err[3:] = rotation_log(Rt @ R.T)
            pos_e, ori_e = np.linalg.norm(err[:3]), np.linalg.norm(err[3:])
            if pos_e < IK_POS_TOL and ori_e < IK_ORI_TOL:
                break
            total = pos_e + ori_e
            if total < best - 1e-7:
                best = total
                stall = 0
            else:
                stall += 1
                if stall > 10:
                    break
            axes = np.einsum("jik,jk->ji", mats[:NUM_JOINTS, :3, :3], robot.axes)
            origins = mats[:NUM_JOINTS, :3, 3]
            J = np.empty((6, NUM_JOINTS))
            J[:3] = np.cross(axes, p - origins).T
            J[3:] = axes.T
            dq = J.T @ np.linalg.solve(J @ J.T + lam2, err)
            step = np.linalg.norm(dq)
            if step > 0.5:
                dq *= 0.5 / step
            q = robot.clamp(q + dq)
        mats = fk_link_matrices(robot, q)
        ee = Pose.from_matrix(mats[-1], check=False)
        if (np.linalg.norm(pt - ee.translation) < IK_POS_TOL
                and geodesic_angle(ee.rotation, Rt) < IK_ORI_TOL
                and robot.within_limits(q)):
            if scene is None or not config_in_collision(robot, q, scene):
                return q
    raise Unreachable("IK attempts exhausted")


# ---------------------------------------------------------------------------
# Default robot: a Franka-Panda-like chain from public kinematic parameters.
# ---------------------------------------------------------------------------

# modified-DH rows (a_{i-1}, d_i, alpha_{i-1}) for the 7 joints
_PANDA_MDH = [
    (0.0, 0.333, 0.0),
    (0.0, 0.0, -np.pi / 2),
    (0.0, 0.316, np.pi / 2),
    (0.0825, 0.0, np.pi / 2),
    (-0.0825, 0.384, -np.pi / 2),
    (0.0, 0.0, np.pi / 2),
    (0.088, 0.0, np.pi / 2),
]
_PANDA_EE_OFFSET = 0.210   # flange (0.107) + gripper reach to TCP

_PANDA_LIMITS = np.array([
    (-2.8973, 2.8973),
    (-1.7628, 1.7628),
    (-2.8973, 2.8973),
    (-3.0718, -0.0698),
    (-2.8973, 2.8973),
    (-0.0175, 3.7525),
    (-2.8973, 2.8973),
])

_PANDA_NEUTRAL = np.array([0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785])

# (link index, local center, radius) sphere approximation of link geometry
_PANDA_SPHERES = [
    (0, (0.0, 0.0, -0.25), 0.075),
    (0, (0.0, 0.0, -0.15), 0.08),
    (0, (0.0, 0.0, 0.0), 0.085),
    (1, (0.0, -0.08, 0.0), 0.07),
    (1, (0.0, -0.16, 0.0), 0.065),
    (1, (0.0, -0.24, 0.0), 0.065),
    (1, (0.0, -0.316, 0.0), 0.07),
    (2, (0.0, 0.0, 0.0), 0.07),
    (2, (0.0415, 0.0, 0.0), 0.06),
    (3, (-0.02, 0.1, 0.0), 0.06),
    (3, (-0.05, 0.2, 0.0), 0.058),
    (3, (-0.0825, 0.3, 0.0), 0.055),
    (3, (-0.0825, 0.384, 0.0), 0.06),
    (4, (0.0, 0.0, -0.1), 0.055),
    (4, (0.0, 0.0, 0.0), 0.065),
    (5, (0.044, 0.0, 0.0), 0.05),
    (5, (0.088, 0.0, 0.0), 0.055),
    (6, (0.0, 0.0, 0.06), 0.05),
    (7, (0.0, 0.0, -0.11), 0.05),
    (7, (0.0, -0.04, -0.05), 0.028),
    (7, (0.0, 0.04, -0.05), 0.028),
    (7, (0.0, -0.045, -0.015), 0.022),
    (7, (0.0, 0.045, -0.015), 0.022),
]

# spheres on the final link that double as the floating-gripper proxy
GRIPPER_PROXY_SPHERES = [
    ((0.0, 0.0, -0.09), 0.05),
    ((0.0, -0.045, -0.02), 0.025),
    ((0.0, 0.045, -0.02), 0.025),
]

_ANCHOR_SEED = 20240117


def _mdh_fixed_transform(a, d, alpha):
    T = np.eye(4)
    ca, sa = np.cos(alpha), np.sin(alpha)
    T[:3, :3] = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    T[:3, 3] = T[:3, :3] @ np.array([0.0, 0.0, d]) + np.array([a, 0.0, 0.0])
    return T


def build_default_robot():
    """Assemble the shipped Panda-like model (deterministic, fixed seed)."""
    fixed = np.stack([_mdh_fixed_transform(a, d, alpha) for a, d, alpha in _PANDA_MDH]
                     + [_mdh_fixed_transform(0.0, _PANDA_EE_OFFSET, 0.0)])
    axes = np.tile(np.array([0.0, 0.0, 1.0]), (NUM_JOINTS, 1))
    sphere_link = np.array([s[0] for s in _PANDA_SPHERES], dtype=int)
    sphere_local = np.array([s[1] for s in _PANDA_SPHERES], dtype=float)
    sphere_radius = np.array([s[2] for s in _PANDA_SPHERES], dtype=float)

    # 1024 anchors sampled area-weighted on the sphere surfaces, fixed seed
    rng = np.random.default_rng(_ANCHOR_SEED)
    areas = sphere_radius ** 2
    counts = rng.multinomial(NUM_SURFACE_ANCHORS, areas / areas.sum())
    anchor_link, anchor_local = [], []
    for i, n in enumerate(counts):
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        anchor_local.append(sphere_local[i] + sphere_radius[i] * dirs)
        anchor_link.extend([sphere_link[i]] * n)
    return RobotModel(
        fixed_transforms=fixed,
        axes=axes,
        limits=_PANDA_LIMITS.copy(),
        neutral=_PANDA_NEUTRAL.copy(),
        sphere_link=sphere_link,
        sphere_local=sphere_local,
        sphere_radius=sphere_radius,
        anchor_link=np.array(anchor_link, dtype=int),
        anchor_local=np.vstack(anchor_local),
        name="panda7_desk",
    )


def save_robot(robot, path):
    doc = {
        "format_version": ROBOT_FORMAT_VERSION,
        "name": robot.name,
        "joints": [
            {"transform": [float(v) for v in robot.fixed_transforms[i].reshape(-1)],
             "axis": [float(v) for v in robot.axes[i]]}
            for i in range(NUM_JOINTS)
        ],
        "ee_transform": [float(v) for v in robot.fixed_transforms[NUM_JOINTS].reshape(-1)],
        "limits": [[float(l), float(u)] for l, u in robot.limits],
        "neutral": [float(v) for v in robot.neutral],
        "collision_spheres": [
            {"link": int(robot.sphere_link[i]),
             "center": [float(v) for v in robot.sphere_local[i]],
             "radius": float(robot.sphere_radius[i])}
            for i in range(len(robot.sphere_link))
        ],
        "surface_anchors": {
            "link": [int(v) for v in robot.anchor_link],
            "offset": [[float(c) for c in row] for row in robot.anchor_local],
        },
    }
    with open(path, "w") as f:
        yaml.safe_dump(doc, f, sort_keys=False, default_flow_style=None)


def load_robot(path_or_stream):
    if hasattr(path_or_stream, "read"):
        doc = yaml.safe_load(path_or_stream)
    else:
        with open(path_or_stream) as f:
            doc = yaml.safe_load(f)
    if doc.get("format_version") != ROBOT_FORMAT_VERSION:
        raise VersionMismatch(f"unsupported robot format_version: {doc.get('format_version')}")
    fixed = np.stack([np.array(j["transform"], dtype=float).reshape(4, 4) for j in doc["joints"]]
                     + [np.array(doc["ee_transform"], dtype=float).reshape(4, 4)])
    return RobotModel(
        fixed_transforms=fixed,
        axes=np.array([j["axis"] for j in doc["joints"]], dtype=float),
        limits=np.array(doc["limits"], dtype=float),
        neutral=np.array(doc["neutral"], dtype=float),
        sphere_link=np.array([s["link"] for s in doc["collision_spheres"]], dtype=int),
        sphere_local=np.array([s["center"] for s in doc["collision_spheres"]], dtype=float),
        sphere_radius=np.array([s["radius"] for s in doc["collision_spheres"]], dtype=float),
        anchor_link=np.array(doc["surface_anchors"]["link"], dtype=int),
        anchor_local=np.array(doc["surface_anchors"]["offset"], dtype=float),
        name=doc.get("name", "robot"),
    )


_DEFAULT_ROBOT = None


def default_robot():
    """The packaged robot description (loaded once, cached)."""
    global _DEFAULT_ROBOT
    if _DEFAULT_ROBOT is None:
        res = importlib.resources.files("motionforge").joinpath("data/panda7_desk.yaml")
        if res.is_file():
            with res.open() as f:
                _DEFAULT_ROBOT = load_robot(f)
        else:
            _DEFAULT_ROBOT = build_default_robot()
    return _DEFAULT_ROBOT
