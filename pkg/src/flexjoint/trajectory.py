"""Joint-space trajectories, execution records and the functional trajectory generator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

COMMAND_DT = 1.0 / 20.0


@dataclass
class Trajectory:
    """Per-joint position/velocity/acceleration sampled every ``dt`` seconds, shape ``(T, N)``."""

    positions: np.ndarray
    velocities: np.ndarray
    accelerations: np.ndarray | None = None
    dt: float = COMMAND_DT

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.velocities = np.atleast_2d(np.asarray(self.velocities, dtype=float))
        if self.velocities.shape != self.positions.shape:
            raise ValueError("positions and velocities must share shape (T, N)")
        if self.accelerations is not None:
            self.accelerations = np.atleast_2d(np.asarray(self.accelerations, dtype=float))
            if self.accelerations.shape != self.positions.shape:
                raise ValueError("accelerations must share shape (T, N)")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n_joints(self) -> int:
        return self.positions.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    @property
    def duration(self) -> float:
        return (len(self) - 1) * self.dt

    def states(self) -> np.ndarray:
        """``(T, 3N)`` stack of ``[theta, theta_dot, theta_ddot]``."""
        if self.accelerations is None:
            raise ValueError("trajectory has no accelerations")
        return np.hstack([self.positions, self.velocities, self.accelerations])

    def slice(self, start: int, stop: int) -> "Trajectory":
        acc = None if self.accelerations is None else self.accelerations[start:stop]
        return Trajectory(self.positions[start:stop], self.velocities[start:stop], acc, self.dt)

    def extended(self, n_before: int = 0, n_after: int = 0) -> "Trajectory":
        """Pad with resting copies of the first/last position (zero velocity and acceleration)."""
        def pad(x, rest):
            head = np.repeat(rest(x[:1]), n_before, axis=0)
            tail = np.repeat(rest(x[-1:]), n_after, axis=0)
            return np.vstack([head, x, tail])
        acc = None if self.accelerations is None else pad(self.accelerations, np.zeros_like)
        return Trajectory(pad(self.positions, lambda r: r), pad(self.velocities, np.zeros_like), acc, self.dt)


@dataclass
class ExecutionRecord:
    """Desired and actual trajectories from one execution.

    The first ``n_nominal`` samples cover the nominal trajectory; any remaining
    samples are the post-trajectory hold while the arm settles.
    """

    desired: Trajectory
    actual: Trajectory
    n_nominal: int
    max_speed: float = 0.0
    payload: float = 0.0
    seed: int | None = None
    inverted: bool = False
    converged: bool = True
    commands: Trajectory | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.desired.positions.shape != self.actual.positions.shape:
            raise ValueError("desired and actual must have the same shape")
        if self.desired.dt != self.actual.dt:
            raise ValueError("desired and actual must share dt")

    def __len__(self):
        return len(self.desired)

    def nominal(self) -> "ExecutionRecord":
        n = self.n_nominal
        return replace(self, desired=self.desired.slice(0, n), actual=self.actual.slice(0, n),
                       commands=None if self.commands is None else self.commands.slice(0, n))


def _quintic_coeffs(p0, v0, p1, v1, T):
    """Per-joint quintic with zero boundary accelerations; returns ``(6, N)`` ascending coefficients."""
    d = p1 - p0
    c3 = (20 * d - (8 * v1 + 12 * v0) * T) / (2 * T**3)
    c4 = (-30 * d + (14 * v1 + 16 * v0) * T) / (2 * T**4)
    c5 = (12 * d - 6 * (v1 + v0) * T) / (2 * T**5)
    return np.stack([p0, v0, np.zeros_like(p0), c3, c4, c5])


def _waypoint_velocities(waypoints, durations):
    n = len(waypoints)
    vel = np.zeros_like(waypoints)
    for j in range(1, n - 1):
        s_prev = (waypoints[j] - waypoints[j - 1]) / durations[j - 1]
        s_next = (waypoints[j + 1] - waypoints[j]) / durations[j]
        same = np.sign(s_prev) == np.sign(s_next)
        vel[j] = np.where(same, 0.5 * (s_prev + s_next), 0.0)
    return vel


def _evaluate(coeffs, durations, times):
    """Position, velocity, acceleration of a piecewise quintic at ``times``."""
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    total = starts[-1]
    n_joints = coeffs[0].shape[1]
    pos = np.empty((len(times), n_joints))
    vel = np.empty_like(pos)
    acc = np.empty_like(pos)
    for k, t in enumerate(times):
        if t >= total:
            pos[k] = _poly(coeffs[-1], durations[-1], 0)
            vel[k] = 0.0
            acc[k] = 0.0
            continue
        seg = min(int(np.searchsorted(starts, t, side="right") - 1), len(durations) - 1)
        tau = t - starts[seg]
        c = coeffs[seg]
        pos[k] = _poly(c, tau, 0)
        vel[k] = _poly(c, tau, 1)
        acc[k] = _poly(c, tau, 2)
    return pos, vel, acc


def _poly(c, tau, order):
    if order == 0:
        return c[0] + tau * (c[1] + tau * (c[2] + tau * (c[3] + tau * (c[4] + tau * c[5]))))
    if order == 1:
        return c[1] + tau * (2 * c[2] + tau * (3 * c[3] + tau * (4 * c[4] + tau * 5 * c[5])))
    return 2 * c[2] + tau * (6 * c[3] + tau * (12 * c[4] + tau * 20 * c[5]))


def quintic_through_waypoints(waypoints, max_speed: float, dt: float = COMMAND_DT,
                              rest_duration: float = 1.0) -> Trajectory:
    """Piecewise-quintic path through ``waypoints`` (rest at both ends), time-scaled so
    the peak joint speed equals ``max_speed``, sampled every ``dt``.
    """
    w = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if max_speed <= 0:
        raise ValueError("max_speed must be positive")
    spans = np.abs(np.diff(w, axis=0)).max(axis=1)
    keep = np.concatenate([[True], spans > 1e-12])
    w = w[keep]
    if len(w) < 2:
        n = int(round(rest_duration / dt)) + 1
        pos = np.repeat(w[:1], n, axis=0)
        return Trajectory(pos, np.zeros_like(pos), np.zeros_like(pos), dt)
    durations = np.abs(np.diff(w, axis=0)).max(axis=1)
    coeffs = _build(w, durations)
    dense = np.concatenate([np.linspace(s, s + d, 201)[:-1] for s, d in
                            zip(np.concatenate([[0.0], np.cumsum(durations)[:-1]]), durations)])
    _, v, _ = _evaluate(coeffs, durations, dense)
    durations = durations * (np.abs(v).max() / max_speed)
    coeffs = _build(w, durations)
    total = durations.sum()
    times = np.arange(int(math.ceil(total / dt - 1e-9)) + 1) * dt
    pos, vel, acc = _evaluate(coeffs, durations, times)
    pos[-1] = w[-1]
    return Trajectory(pos, vel, acc, dt)


def _build(w, durations):
    vel = _waypoint_velocities(w, durations)
    return [_quintic_coeffs(w[j], vel[j], w[j + 1], vel[j + 1], durations[j])
            for j in range(len(durations))]


def generate_functional_trajectory(rng: np.random.Generator, n_joints: int, max_speed: float,
                                   joint_limits=None, waypoint_prob: float = 0.6,
                                   min_travel: float = 0.3, dt: float = COMMAND_DT,
                                   max_tries: int = 100) -> Trajectory:
    """Random start/goal (plus 1-2 intermediate waypoints with probability ``waypoint_prob``)."""
    limits = np.asarray(joint_limits if joint_limits is not None
                        else [(-1.3, 1.3)] * n_joints, dtype=float)
    lo, hi = limits[:, 0], limits[:, 1]
    for _ in range(max_tries):
        start = rng.uniform(lo, hi)
        goal = rng.uniform(lo, hi)
        n_via = int(rng.integers(1, 3)) if rng.random() < waypoint_prob else 0
        via = [rng.uniform(lo, hi) for _ in range(n_via)]
        if np.abs(goal - start).max() < min_travel:
            continue
        traj = quintic_through_waypoints([start, *via, goal], max_speed, dt)
        if np.all(traj.positions >= lo) and np.all(traj.positions <= hi):
            return traj
    raise RuntimeError(f"could not generate a trajectory inside joint limits after {max_tries} tries")
