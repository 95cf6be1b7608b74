"""Trajectory container, rejection-sampling validator, and spline retiming."""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import robot as rb
from .scene import configs_in_collision

DEFAULT_DT = 0.08
JERK_LIMIT = 8500.0          # rad/s^3 per joint
DIVERGENCE_LIMIT = 0.05      # meters, final EE position error


@dataclass
class Trajectory:
    """Time-stamped joint-space trajectory."""

    configs: np.ndarray          # (T, 7)
    dt: float = DEFAULT_DT
    provenance: str = "global"   # global | hybrid | policy
    planning_time: float = 0.0

    def __post_init__(self):
        self.configs = np.atleast_2d(np.asarray(self.configs, dtype=float))
        assert len(self.configs) >= 2
        assert self.dt > 0
        assert np.all(np.isfinite(self.configs))

    def __len__(self):
        return len(self.configs)

    def path_length(self):
        return float(np.sum(np.linalg.norm(np.diff(self.configs, axis=0), axis=1)))

    def joint_speed_profile(self):
        return np.linalg.norm(np.diff(self.configs, axis=0), axis=1) / self.dt

    def ee_positions(self, robot):
        return rb.fk_batch(robot, self.configs)[:, -1, :3, 3]

    def ee_speed_profile(self, robot):
        p = self.ee_positions(robot)
        return np.linalg.norm(np.diff(p, axis=0), axis=1) / self.dt

    def to_dict(self):
        return {"configs": self.configs.tolist(), "dt": self.dt,
                "provenance": self.provenance, "planning_time": self.planning_time}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["configs"], dtype=float), d["dt"],
                   d.get("provenance", "global"), d.get("planning_time", 0.0))


@dataclass
class ValidationReport:
    collision_free: bool
    within_limits: bool
    max_jerk: float
    divergence: float
    verdict: bool = None

    def __post_init__(self):
        expected = (self.collision_free and self.within_limits
                    and self.max_jerk <= JERK_LIMIT
                    and self.divergence <= DIVERGENCE_LIMIT)
        if self.verdict is None:
            self.verdict = expected
        assert self.verdict == expected

    def to_dict(self):
        return {"collision_free": self.collision_free, "within_limits": self.within_limits,
                "max_jerk": self.max_jerk, "divergence": self.divergence,
                "verdict": self.verdict}

    @classmethod
    def from_dict(cls, d):
        return cls(d["collision_free"], d["within_limits"], d["max_jerk"],
                   d["divergence"], d.get("verdict"))


def max_jerk(configs, dt):
    """Per-joint max |third-order finite difference| / dt^3."""
    configs = np.asarray(configs, dtype=float)
    if len(configs) < 4:
        return 0.0
    d3 = np.diff(configs, n=3, axis=0)
    return float(np.max(np.abs(d3)) / dt ** 3)


def validate_trajectory(traj, problem, robot):
    """Rejection-sampling gate: collisions, limits, jerk, final divergence."""
    collision_free = not bool(np.any(configs_in_collision(robot, traj.configs,
                                                          problem.scene, margin=0.0)))
    within = bool(np.all(traj.configs >= robot.limits[:, 0] - 1e-9)
                  and np.all(traj.configs <= robot.limits[:, 1] + 1e-9))
    jerk = max_jerk(traj.configs, traj.dt)
    final_pos = rb.fk_link_matrices(robot, traj.configs[-1])[-1, :3, 3]
    divergence = float(np.linalg.norm(final_pos - problem.target.translation))
    return ValidationReport(collision_free, within, jerk, divergence)


def _dedup_arclength(configs):
    """Cumulative joint-space arc length with strictly increasing knots."""
    configs = np.asarray(configs, dtype=float)
    seg = np.linalg.norm(np.diff(configs, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-10])
    configs = configs[keep]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(configs, axis=0), axis=1))])
    return configs, s


def retime_constant_speed(configs, dt=DEFAULT_DT, step_displacement=0.04,
                          provenance="hybrid", use_spline=True):
    """Resample a joint path at uniform joint-space arc length.

    Fits a cubic spline through the waypoints (arc-length parametrized) and
    evaluates it at evenly spaced arc positions, yielding near-constant
    per-step displacement.  Endpoints are preserved exactly.
    """
    configs, s = _dedup_arclength(configs)
    if len(configs) < 2 or s[-1] < 1e-9:
        out = np.vstack([configs[0], configs[-1]]) if len(configs) else configs
        return Trajectory(out, dt, provenance)
    n_steps = max(2, int(np.ceil(s[-1] / step_displacement)) + 1)
    if use_spline and len(configs) >= 4:
        spline = CubicSpline(s, configs, axis=0)
        # reparametrize by the spline's own arc length for a steady speed
        s_dense = np.linspace(0.0, s[-1], max(8 * n_steps, 256))
        q_dense = spline(s_dense)
        arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(q_dense, axis=0), axis=1))])
        targets = np.linspace(0.0, arc[-1], n_steps)
        s_eval = np.interp(targets, arc, s_dense)
        out = spline(s_eval)
    else:
        targets = np.linspace(0.0, s[-1], n_steps)
        out = np.empty((n_steps, configs.shape[1]))
        for j in range(configs.shape[1]):
            out[:, j] = np.interp(targets, s, configs[:, j])
    out[0] = configs[0]
    out[-1] = configs[-1]
    return Trajectory(out, dt, provenance)
