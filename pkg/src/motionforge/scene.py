"""Scene primitives, analytic SDFs, surface sampling, collision predicates."""

from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from . import robot as rb

FLOOR_PATCH_HALF = 2.0   # finite patch used when area-sampling the floor


@dataclass
class Primitive:
    """Axis-parametrized obstacle: box, upright cylinder, or floor half-space.

    dims: box half-extents (3,), cylinder (radius, half_height), floor ().
    """

    kind: str
    pose: Pose
    dims: np.ndarray

    def __post_init__(self):
        assert self.kind in ("box", "cylinder", "floor")
        self.dims = np.asarray(self.dims, dtype=float)
        assert np.all(self.dims > 0) or self.kind == "floor"

    def to_dict(self):
        return {
            "kind": self.kind,
            "rotation": self.pose.rotation.reshape(-1).tolist(),
            "translation": self.pose.translation.tolist(),
            "dims": self.dims.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        pose = Pose(np.array(d["rotation"]).reshape(3, 3), np.array(d["translation"]))
        return cls(d["kind"], pose, np.array(d["dims"], dtype=float))


@dataclass
class GoalVolume:
    """Labeled axis-aligned region with a nominal target approach direction."""

    label: str
    lo: np.ndarray
    hi: np.ndarray
    approach_dir: np.ndarray    # nominal gripper z-axis for targets here

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.approach_dir = np.asarray(self.approach_dir, dtype=float)
        assert np.all(self.hi > self.lo)

    def contains(self, p):
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))

    def sample(self, rng, margin=0.0):
        lo = self.lo + margin
        hi = self.hi - margin
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        return rng.uniform(lo, hi)

    def to_dict(self):
        return {"label": self.label, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "approach_dir": self.approach_dir.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["label"], np.array(d["lo"]), np.array(d["hi"]), np.array(d["approach_dir"]))


@dataclass
class Scene:
    """Obstacle set with labeled goal volumes."""

    primitives: list
    env_kind: str
    goal_volumes: list = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        assert self.primitives, "scene must be non-empty"

    def to_dict(self):
        return {
            "env_kind": self.env_kind,
            "rng_seed": int(self.rng_seed),
            "primitives": [p.to_dict() for p in self.primitives],
            "goal_volumes": [v.to_dict() for v in self.goal_volumes],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([Primitive.from_dict(p) for p in d["primitives"]],
                   d["env_kind"],
                   [GoalVolume.from_dict(v) for v in d.get("goal_volumes", [])],
                   d.get("rng_seed", 0))


# ---------------------------------------------------------------------------
# Signed distance evaluation
# ---------------------------------------------------------------------------

def _primitive_sdf(prim, points):
    """Exact signed distance of each point to one primitive."""
    points = np.atleast_2d(points)
    if prim.kind == "floor":
        return points[:, 2] - prim.pose.translation[2]
    local = (points - prim.pose.translation) @ prim.pose.rotation
    if prim.kind == "box":
        qv = np.abs(local) - prim.dims
        outside = np.linalg.norm(np.maximum(qv, 0.0), axis=1)
        inside = np.minimum(np.max(qv, axis=1), 0.0)
        return outside + inside
    # upright cylinder in its local frame
    r, hh = prim.dims
    d_rad = np.hypot(local[:, 0], local[:, 1]) - r
    d_ax = np.abs(local[:, 2]) - hh
    dv = np.stack([d_rad, d_ax], axis=1)
    outside = np.linalg.norm(np.maximum(dv, 0.0), axis=1)
    inside = np.minimum(np.max(dv, axis=1), 0.0)
    return outside + inside


def _primitive_sdf_grad(prim, points):
    """Analytic gradient of the primitive SDF (unit outward direction)."""
    points = np.atleast_2d(points)
    n = points.shape[0]
    if prim.kind == "floor":
        g = np.zeros((n, 3))
        g[:, 2] = 1.0
        return g
    local = (points - prim.pose.translation) @ prim.pose.rotation
    if prim.kind == "box":
        qv = np.abs(local) - prim.dims
        outside_v = np.maximum(qv, 0.0)
        norm = np.linalg.norm(outside_v, axis=1)
        g = np.zeros((n, 3))
        out = norm > 1e-12
        g[out] = (outside_v[out] / norm[out, None]) * np.sign(local[out])
        # inside: push along the least-penetrated axis
        ins = ~out
        if np.any(ins):
            ax = np.argmax(qv[ins], axis=1)
            gi = np.zeros((ins.sum(), 3))
            gi[np.arange(len(ax)), ax] = np.sign(local[ins, :][np.arange(len(ax)), ax])
            gi[gi == 0] = 0.0
            g[ins] = gi
    else:
        r, hh = prim.dims
        rho = np.hypot(local[:, 0], local[:, 1])
        d_rad = rho - r
        d_ax = np.abs(local[:, 2]) - hh
        g = np.zeros((n, 3))
        radial = np.zeros((n, 3))
        ok = rho > 1e-12
        radial[ok, 0] = local[ok, 0] / rho[ok]
        radial[ok, 1] = local[ok, 1] / rho[ok]
        axial = np.zeros((n, 3))
        axial[:, 2] = np.sign(local[:, 2])
        both_out = (d_rad > 0) & (d_ax > 0)
        if np.any(both_out):
            v = np.stack([d_rad[both_out], d_ax[both_out]], axis=1)
            w = v / np.linalg.norm(v, axis=1, keepdims=True)
            g[both_out] = radial[both_out] * w[:, :1] + axial[both_out] * w[:, 1:]
        side = (~both_out) & (d_rad >= d_ax)
        g[side] = radial[side]
        cap = (~both_out) & (d_ax > d_rad)
        g[cap] = axial[cap]
    return g @ prim.pose.rotation.T


def sdf_eval(scene, points, return_index=False):
    """Min signed distance over scene primitives; negative inside.

    Accepts one point or (N,3).  With return_index=True also returns the
    argmin primitive index per point.
    """
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    pts = np.atleast_2d(points)
    dists = np.stack([_primitive_sdf(p, pts) for p in scene.primitives])
    idx = np.argmin(dists, axis=0)
    d = dists[idx, np.arange(pts.shape[0])]
    if single:
        d, idx = float(d[0]), int(idx[0])
    if return_index:
        return d, idx
    return d


def sdf_grad(scene, points):
    """Gradient of the scene SDF (from the argmin primitive)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, idx = sdf_eval(scene, points, return_index=True)
    idx = np.atleast_1d(idx)
    g = np.empty((points.shape[0], 3))
    for j in np.unique(idx):
        sel = idx == j
        g[sel] = _primitive_sdf_grad(scene.primitives[j], points[sel])
    return g


def per_primitive_sdf(scene, points):
    """(P, N) matrix of every primitive's SDF (used by the collision loss)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.stack([_primitive_sdf(p, pts) for p in scene.primitives])


def per_primitive_sdf_grad(scene, points):
    """(P, N, 3) per-primitive SDF gradients."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return np.stack([_primitive_sdf_grad(p, pts) for p in scene.primitives])


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------

def _primitive_area(prim):
    if prim.kind == "floor":
        return (2.0 * FLOOR_PATCH_HALF) ** 2
    if prim.kind == "box":
        a, b, c = prim.dims
        return 8.0 * (a * b + b * c + c * a)
    r, hh = prim.dims
    return 2.0 * np.pi * r * (2.0 * hh) + 2.0 * np.pi * r * r


def _sample_on_primitive(prim, n, rng):
    if n == 0:
        return np.zeros((0, 3))
    if prim.kind == "floor":
        xy = rng.uniform(-FLOOR_PATCH_HALF, FLOOR_PATCH_HALF, size=(n, 2))
        local = np.column_stack([xy, np.zeros(n)])
        return local + prim.pose.translation * np.array([0.0, 0.0, 1.0])
    if prim.kind == "box":
        a, b, c = prim.dims
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        faces = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 3)) * prim.dims
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        u[np.arange(n), axis] = sign * prim.dims[axis]
        local = u
    else:
        r, hh = prim.dims
        side_area = 2.0 * np.pi * r * (2.0 * hh)
        cap_area = np.pi * r * r
        which = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area])
                           / (side_area + 2 * cap_area))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
        local = np.empty((n, 3))
        side = which == 0
        local[side, 0] = r * np.cos(phi[side])
        local[side, 1] = r * np.sin(phi[side])
        local[side, 2] = rng.uniform(-hh, hh, size=side.sum())
        for w, zsign in ((1, 1.0), (2, -1.0)):
            capm = which == w
            rr = r * np.sqrt(rng.uniform(0.0, 1.0, size=capm.sum()))
            local[capm, 0] = rr * np.cos(phi[capm])
            local[capm, 1] = rr * np.sin(phi[capm])
            local[capm, 2] = zsign * hh
    return local @ prim.pose.rotation.T + prim.pose.translation


def sample_surface_cloud(scene, n, rng, max_rounds=64):
    """Area-weighted uniform samples on the union surface of the scene.

    Points landing strictly inside another primitive are rejected so that
    |sdf_eval| stays within tolerance of zero for every emitted point.
    """
    assert n >= 1
    areas = np.array([_primitive_area(p) for p in scene.primitives])
    probs = areas / areas.sum()
    out = []
    got = 0
    for _ in range(max_rounds):
        need = n - got
        if need <= 0:
            break
        counts = rng.multinomial(need, probs)
        pts = np.vstack([_sample_on_primitive(p, c, rng)
                         for p, c in zip(scene.primitives, counts)])
        keep = np.abs(sdf_eval(scene, pts)) <= 1e-6
        pts = pts[keep]
        out.append(pts)
        got += len(pts)
    pts = np.vstack(out) if out else np.zeros((0, 3))
    if len(pts) < n:
        # pathological overlap; repeat what we have
        reps = int(np.ceil(n / max(len(pts), 1)))
        pts = np.vstack([pts] * reps)
    return pts[:n]


# ---------------------------------------------------------------------------
# Collision predicates
# ---------------------------------------------------------------------------

def self_collision(robot, q):
    if len(robot.self_pairs) == 0:
        return False
    centers = rb.sphere_centers(robot, q)
    a, b = robot.self_pairs[:, 0], robot.self_pairs[:, 1]
    d = np.linalg.norm(centers[a] - centers[b], axis=1)
    return bool(np.any(d < robot.sphere_radius[a] + robot.sphere_radius[b]))


def config_in_collision(robot, q, scene, margin=0.0):
    """Sphere-model collision: environment (SDF) or self collision."""
    centers = rb.sphere_centers(robot, q)
    if scene is not None and scene.primitives:
        d = sdf_eval(scene, centers)
        if np.any(d < robot.sphere_radius + margin):
            return True
    return self_collision(robot, q)


def configs_in_collision(robot, Q, scene, margin=0.0):
    """Vectorized collision check over a batch of configs -> bool array."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    centers = rb.sphere_centers_batch(robot, Q)            # (M,S,3)
    M, S, _ = centers.shape
    hit = np.zeros(M, dtype=bool)
    if scene is not None and scene.primitives:
        d = sdf_eval(scene, centers.reshape(-1, 3)).reshape(M, S)
        hit |= np.any(d < robot.sphere_radius[None, :] + margin, axis=1)
    if len(robot.self_pairs):
        a, b = robot.self_pairs[:, 0], robot.self_pairs[:, 1]
        dd = np.linalg.norm(centers[:, a] - centers[:, b], axis=2)
        hit |= np.any(dd < (robot.sphere_radius[a] + robot.sphere_radius[b])[None, :], axis=1)
    return hit
