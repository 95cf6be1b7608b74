"""Rotation and pose utilities used throughout the pipeline."""

import numpy as np


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def homogeneous(rotation, translation):
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def rot_x(a):
    return rotation_about_axis([1.0, 0.0, 0.0], a)


def rot_y(a):
    return rotation_about_axis([0.0, 1.0, 0.0], a)


def rot_z(a):
    return rotation_about_axis([0.0, 0.0, 1.0], a)


def geodesic_angle(Ra, Rb):
    """Angle of the relative rotation between two orthonormal matrices."""
    tr = np.trace(Ra.T @ Rb)
    return float(np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0)))


def rotation_log(R):
    """Rotation vector (axis * angle) of an orthonormal matrix."""
    angle = geodesic_angle(np.eye(3), R)
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near-pi: extract axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        # fix signs using off-diagonals
        if axis[0] > 1e-6:
            axis[1] = np.copysign(axis[1], A[0, 1])
            axis[2] = np.copysign(axis[2], A[0, 2])
        elif axis[1] > 1e-6:
            axis[2] = np.copysign(axis[2], A[1, 2])
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return w * (angle / (2.0 * np.sin(angle)))


def slerp(Ra, Rb, t):
    """Geodesic interpolation between two rotations."""
    return Ra @ rotation_from_log(t * rotation_log(Ra.T @ Rb))


def rotation_from_log(w):
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3)
    return rotation_about_axis(w / angle, angle)


def orthonormality_residual(R):
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


class Pose:
    """Rigid transform: 3x3 rotation + translation in meters."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation=None, translation=None, check=True):
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        self.translation = np.zeros(3) if translation is None else np.asarray(translation, dtype=float)
        if check and orthonormality_residual(self.rotation) > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if check and np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation has negative determinant")

    @classmethod
    def from_matrix(cls, T, check=True):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3], check=check)

    def matrix(self):
        return homogeneous(self.rotation, self.translation)

    def apply(self, points):
        """Transform one point or an (N,3) array."""
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other):
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation, check=False)

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation, check=False)

    def __repr__(self):
        return f"Pose(t={np.array2string(self.translation, precision=4)})"


def sample_cone_direction(rng, nominal, half_angle):
    """Uniform direction on the spherical cap of the given half-angle."""
    nominal = np.asarray(nominal, dtype=float)
    nominal = nominal / np.linalg.norm(nominal)
    cos_max = np.cos(half_angle)
    z = rng.uniform(cos_max, 1.0)
    phi = rng.uniform(0.0, 2.0 * np.pi)
    r = np.sqrt(max(0.0, 1.0 - z * z))
    local = np.array([r * np.cos(phi), r * np.sin(phi), z])
    # rotate local +z onto the nominal direction
    if nominal[2] > 1.0 - 1e-12:
        R = np.eye(3)
    elif nominal[2] < -1.0 + 1e-12:
        R = np.diag([1.0, -1.0, -1.0])
    else:
        axis = np.cross([0.0, 0.0, 1.0], nominal)
        axis = axis / np.linalg.norm(axis)
        R = rotation_about_axis(axis, np.arccos(np.clip(nominal[2], -1.0, 1.0)))
    return R @ local


def frame_from_z(z_axis, rng=None, roll=None):
    """Build an orthonormal rotation whose third column is z_axis."""
    z = np.asarray(z_axis, dtype=float)
    z = z / np.linalg.norm(z)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    if roll is None and rng is not None:
        roll = rng.uniform(-np.pi, np.pi)
    if roll:
        R = R @ rot_z(roll)
    return R
