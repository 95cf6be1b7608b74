"""Single-view depth rendering by sphere tracing the scene SDF."""

import numpy as np

from .errors import EmptyView
from .geometry import Pose, rot_y, rot_z
from .scene import sdf_eval

VERTICAL_FOV = np.deg2rad(60.0)
ASPECT = 4.0 / 3.0
MAX_STEPS = 128
SURFACE_TOL = 1e-4
MAX_RANGE = 10.0


def default_camera_pose(distance=1.6, pitch_down=np.deg2rad(45.0), yaw=0.0, height=None):
    """Camera on a ring around the base, looking at the workspace center.

    Camera frame: +z forward (view direction), +x right, +y down.
    """
    if height is None:
        height = distance * np.sin(pitch_down)
    ground = distance * np.cos(pitch_down)
    position = rot_z(yaw) @ np.array([-ground, 0.0, height])
    # forward along +x, pitched down, then yawed with the position
    R_forward = np.array([[0.0, 0.0, 1.0],
                          [-1.0, 0.0, 0.0],
                          [0.0, -1.0, 0.0]])   # camera axes in world at yaw 0, level
    R = rot_z(yaw) @ rot_y(pitch_down) @ R_forward
    return Pose(R, position, check=False)


def render_partial_cloud(scene, camera_pose, n, rng, grid=(128, 96)):
    """First-hit points of a pinhole ray grid, subsampled to n points.

    Returns (points, primitive_index) where indices identify the nearest
    primitive at each hit.  Raises EmptyView if no ray hits within range.
    """
    assert n >= 1
    w, h = grid
    half_v = np.tan(VERTICAL_FOV / 2.0)
    half_u = half_v * ASPECT
    u = np.linspace(-half_u, half_u, w)
    v = np.linspace(-half_v, half_v, h)
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
    dirs = dirs_cam @ camera_pose.rotation.T
    origin = camera_pose.translation

    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(MAX_STEPS):
        if not np.any(active):
            break
        pts = origin + t[active, None] * dirs[active]
        d = sdf_eval(scene, pts)
        newly_hit = d < SURFACE_TOL
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[active] += np.maximum(d, 0.0)
        still = ~newly_hit & (t[active] < MAX_RANGE)
        active[idx] = still
    if not np.any(hit):
        raise EmptyView("no ray hit a surface within range")
    points = origin + t[hit, None] * dirs[hit]
    _, prim_idx = sdf_eval(scene, points, return_index=True)
    prim_idx = np.atleast_1d(prim_idx)
    if len(points) >= n:
        sel = rng.choice(len(points), size=n, replace=False)
    else:
        sel = rng.choice(len(points), size=n, replace=True)
    return points[sel], prim_idx[sel]
