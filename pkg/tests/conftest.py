import numpy as np
import pytest

from motionforge import robot as rb
from motionforge.geometry import Pose
from motionforge.scene import Primitive, Scene


@pytest.fixture(scope="session")
def robot():
    return rb.default_robot()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_box(center, half, yaw=0.0):
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Primitive("box", Pose(R, np.asarray(center, dtype=float)), np.asarray(half, dtype=float))


def make_cylinder(center, radius, half_height):
    return Primitive("cylinder", Pose(translation=np.asarray(center, dtype=float)),
                     np.array([radius, half_height]))


def make_floor(z=0.0):
    return Primitive("floor", Pose(translation=np.array([0.0, 0.0, z])), np.array([1.0]))


@pytest.fixture
def simple_scene():
    return Scene([make_floor(),
                  make_box([0.6, 0.0, 0.1], [0.15, 0.2, 0.1]),
                  make_cylinder([0.3, 0.4, 0.25], 0.06, 0.25)], "tabletop")


def random_inlimit_config(robot, rng):
    return rng.uniform(robot.limits[:, 0], robot.limits[:, 1])
