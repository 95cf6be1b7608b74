import numpy as np
import pytest

from motionforge.geometry import (Pose, frame_from_z, geodesic_angle,
                                  rotation_about_axis, rotation_from_log,
                                  rotation_log, rot_x, rot_y, rot_z,
                                  sample_cone_direction, slerp)


def test_rotation_about_axis_matches_elementary_rotations():
    for angle in (0.3, -1.2, 2.9):
        assert np.allclose(rotation_about_axis([1, 0, 0], angle), rot_x(angle))
        assert np.allclose(rotation_about_axis([0, 1, 0], angle), rot_y(angle))
        assert np.allclose(rotation_about_axis([0, 0, 1], angle), rot_z(angle))


def test_rotation_is_orthonormal():
    rng = np.random.default_rng(0)
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        R = rotation_about_axis(axis, rng.uniform(-np.pi, np.pi))
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)


def test_log_exp_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        w = rng.normal(size=3) * 0.9
        R = rotation_from_log(w)
        assert np.allclose(rotation_log(R), w, atol=1e-9)


def test_geodesic_angle_known_values():
    assert geodesic_angle(np.eye(3), np.eye(3)) == pytest.approx(0.0, abs=1e-12)
    assert geodesic_angle(np.eye(3), rot_z(np.pi / 2)) == pytest.approx(np.pi / 2)
    assert geodesic_angle(np.eye(3), rot_x(np.pi)) == pytest.approx(np.pi)


def test_slerp_endpoints_and_midpoint():
    A = rot_z(0.2)
    B = rot_z(1.4)
    assert np.allclose(slerp(A, B, 0.0), A)
    assert np.allclose(slerp(A, B, 1.0), B)
    assert np.allclose(slerp(A, B, 0.5), rot_z(0.8), atol=1e-12)


def test_pose_compose_inverse():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = Pose(rotation_from_log(rng.normal(size=3)), rng.normal(size=3))
        q = Pose(rotation_from_log(rng.normal(size=3)), rng.normal(size=3))
        both = p.compose(q)
        x = rng.normal(size=3)
        assert np.allclose(both.apply(x), p.apply(q.apply(x)), atol=1e-12)
        ident = p.compose(p.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0.0, atol=1e-12)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.5, np.zeros(3))


def test_sample_cone_direction_within_half_angle():
    rng = np.random.default_rng(3)
    axis = np.array([0.0, 0.0, -1.0])
    half = np.deg2rad(30.0)
    for _ in range(200):
        d = sample_cone_direction(rng, axis, half)
        assert np.isclose(np.linalg.norm(d), 1.0)
        assert np.dot(d, axis) >= np.cos(half) - 1e-12


def test_frame_from_z_column_matches_direction():
    rng = np.random.default_rng(4)
    for _ in range(50):
        z = rng.normal(size=3)
        z /= np.linalg.norm(z)
        R = frame_from_z(z)
        assert np.allclose(R[:, 2], z, atol=1e-12)
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.isclose(np.linalg.det(R), 1.0)
