"""Planar N-link flexible-joint (series-elastic) arm with a model-based inner loop.

Link side:  M(q) q'' + c(q, q') + g(q) + d_l q' = K (theta_m - q)
Motor side: J theta_m'' + d_m theta_m' + K (theta_m - q) = tau

Joint angles are relative; angle zero points along +x and gravity acts along -y.
The inner loop runs at the integrator rate and holds each 20 Hz command sample
over the interval that ends at that sample's time stamp.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numba import njit

from .signal import spline_acceleration
from .trajectory import COMMAND_DT, ExecutionRecord, Trajectory

log = logging.getLogger(__name__)

HOLD_CAP = 3.0


@dataclass(frozen=True)
class ArmConfig:
    n_joints: int = 3
    link_mass: tuple = ()
    link_length: tuple = ()
    com: tuple = ()
    link_inertia: tuple = ()
    stiffness: tuple = ()
    motor_inertia: tuple = ()
    link_damping: tuple = ()
    motor_damping: tuple = ()
    gravity: float = 9.81
    sim_dt: float = 1e-3
    command_dt: float = COMMAND_DT
    kp: tuple = ()
    kd: tuple = ()
    model_error: float = 1.10
    torque_limit: float = 150.0
    joint_limits: tuple = ()
    pos_tol: float = 0.01
    vel_tol: float = 0.05

    def __post_init__(self):
        n = self.n_joints
        if n < 1:
            raise ValueError("n_joints must be >= 1")
        defaults = {
            "link_mass": 2.0, "link_length": 0.35, "stiffness": 100.0, "motor_inertia": 0.05,
            "link_damping": 0.1, "motor_damping": 0.05, "kp": 80.0, "kd": 6.0,
        }
        for name, value in defaults.items():
            self._fill(name, value)
        self._fill("com", np.asarray(self.link_length) / 2)
        self._fill("link_inertia", np.asarray(self.link_mass) * np.asarray(self.link_length) ** 2 / 12)
        if not self.joint_limits:
            object.__setattr__(self, "joint_limits", tuple((-1.3, 1.3) for _ in range(n)))
        for name in ("link_mass", "link_length", "link_inertia", "stiffness", "motor_inertia"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")
        if not 0 < self.sim_dt <= 2e-3:
            raise ValueError("integrator step must be in (0, 2 ms]")
        ratio = self.command_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("command interval must be an integer multiple of the integrator step")

    def _fill(self, name, value):
        current = getattr(self, name)
        if current is None or (isinstance(current, tuple) and len(current) == 0):
            current = value
        arr = np.broadcast_to(np.asarray(current, dtype=float), (self.n_joints,))
        object.__setattr__(self, name, tuple(float(v) for v in arr))

    def arr(self, name) -> np.ndarray:
        return np.asarray(getattr(self, name), dtype=float)

    @property
    def substeps(self) -> int:
        return int(round(self.command_dt / self.sim_dt))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["joint_limits"] = [list(x) for x in self.joint_limits]
        return d


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    theta_m: np.ndarray
    theta_m_dot: np.ndarray
    payload: float = 0.0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd, self.theta_m, self.theta_m_dot])

    @classmethod
    def from_vector(cls, x, payload=0.0):
        n = len(x) // 4
        return cls(x[:n].copy(), x[n:2 * n].copy(), x[2 * n:3 * n].copy(), x[3 * n:].copy(), payload)


@njit(cache=True)
def _rnea(q, qd, qdd, grav, mass, length, com, inertia, payload):
    """Planar recursive Newton-Euler; gravity enters as an upward base acceleration."""
    n = q.shape[0]
    acx = np.empty(n)
    acy = np.empty(n)
    cs = np.empty(n)
    sn = np.empty(n)
    al = np.empty(n)
    phi = 0.0
    w = 0.0
    alpha = 0.0
    ax = 0.0
    ay = grav
    for i in range(n):
        phi += q[i]
        w += qd[i]
        alpha += qdd[i]
        c = np.cos(phi)
        s = np.sin(phi)
        cs[i] = c
        sn[i] = s
        al[i] = alpha
        acx[i] = ax - alpha * com[i] * s - w * w * com[i] * c
        acy[i] = ay + alpha * com[i] * c - w * w * com[i] * s
        ax = ax - alpha * length[i] * s - w * w * length[i] * c
        ay = ay + alpha * length[i] * c - w * w * length[i] * s
    fx = payload * ax
    fy = payload * ay
    nz = 0.0
    tau = np.empty(n)
    for i in range(n - 1, -1, -1):
        mx = mass[i] * acx[i]
        my = mass[i] * acy[i]
        c = cs[i]
        s = sn[i]
        nz = inertia[i] * al[i] + nz + com[i] * (c * my - s * mx) + length[i] * (c * fy - s * fx)
        fx += mx
        fy += my
        tau[i] = nz
    return tau


@njit(cache=True)
def _mass_matrix(q, mass, length, com, inertia, payload):
    n = q.shape[0]
    M = np.empty((n, n))
    z = np.zeros(n)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        M[:, j] = _rnea(q, z, e, 0.0, mass, length, com, inertia, payload)
    return M


@njit(cache=True)
def _deriv(x, tau, mass, length, com, inertia, payload, grav, K, J, dl, dm):
    n = tau.shape[0]
    q = x[:n]
    qd = x[n:2 * n]
    th = x[2 * n:3 * n]
    thd = x[3 * n:]
    M = _mass_matrix(q, mass, length, com, inertia, payload)
    h = _rnea(q, qd, np.zeros(n), grav, mass, length, com, inertia, payload)
    spring = K * (th - q)
    out = np.empty(4 * n)
    out[:n] = qd
    out[n:2 * n] = np.linalg.solve(M, spring - h - dl * qd)
    out[2 * n:3 * n] = thd
    out[3 * n:] = (tau - dm * thd - spring) / J
    return out


@njit(cache=True)
def _rk4(x, tau, h, mass, length, com, inertia, payload, grav, K, J, dl, dm):
    k1 = _deriv(x, tau, mass, length, com, inertia, payload, grav, K, J, dl, dm)
    k2 = _deriv(x + 0.5 * h * k1, tau, mass, length, com, inertia, payload, grav, K, J, dl, dm)
    k3 = _deriv(x + 0.5 * h * k2, tau, mass, length, com, inertia, payload, grav, K, J, dl, dm)
    k4 = _deriv(x + h * k3, tau, mass, length, com, inertia, payload, grav, K, J, dl, dm)
    return x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _feedforward(cq, cqd, cqdd, grav, mass_hat, length, com, inertia_hat, J, damping):
    """Controller's rigid-model torque for every command sample."""
    T, n = cq.shape
    out = np.empty((T, n))
    for k in range(T):
        out[k] = _rnea(cq[k], cqd[k], cqdd[k], grav, mass_hat, length, com, inertia_hat, 0.0) \
            + J * cqdd[k] + damping * cqd[k]
    return out


@njit(cache=True)
def _simulate(cq, cqd, ff, x0, goal, n_nominal, max_samples, nsub, h,
              mass, length, com, inertia, payload, grav, K, J, dl, dm, kp, kd, tlim,
              pos_tol, vel_tol):
    """Run the inner loop; returns (samples, n_recorded, n_clamped, failed)."""
    n_cmd, n = cq.shape
    xs = np.empty((max_samples, 4 * n))
    x = x0.copy()
    xs[0] = x
    clamped = 0
    k = 0
    while True:
        if k >= n_nominal - 1:
            done = True
            for j in range(n):
                if abs(x[j] - goal[j]) >= pos_tol or abs(x[n + j]) >= vel_tol:
                    done = False
            if done or k == max_samples - 1:
                return xs, k + 1, clamped, False
        c = min(k + 1, n_cmd - 1)
        for _ in range(nsub):
            tau = ff[c] + kp * (cq[c] - x[:n]) + kd * (cqd[c] - x[3 * n:])
            for j in range(n):
                if tau[j] > tlim:
                    tau[j] = tlim
                    clamped += 1
                elif tau[j] < -tlim:
                    tau[j] = -tlim
                    clamped += 1
            x_new = _rk4(x, tau, h, mass, length, com, inertia, payload, grav, K, J, dl, dm)
            for j in range(4 * n):
                if not np.isfinite(x_new[j]):
                    xs[k + 1] = x
                    return xs, k + 2, clamped, True
            x = x_new
        k += 1
        xs[k] = x


def _plant_args(cfg: ArmConfig, payload: float):
    return (cfg.arr("link_mass"), cfg.arr("link_length"), cfg.arr("com"), cfg.arr("link_inertia"),
            float(payload), cfg.gravity, cfg.arr("stiffness"), cfg.arr("motor_inertia"),
            cfg.arr("link_damping"), cfg.arr("motor_damping"))


def dynamics_terms(cfg: ArmConfig, q, qd, payload: float = 0.0):
    """Rigid link-side terms ``(M, c, g)`` of the planar chain."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise ValueError("non-finite state")
    mass, length, com, inertia = (cfg.arr(k) for k in ("link_mass", "link_length", "com", "link_inertia"))
    zero = np.zeros_like(q)
    M = _mass_matrix(q, mass, length, com, inertia, payload)
    g = _rnea(q, zero, zero, cfg.gravity, mass, length, com, inertia, payload)
    c = _rnea(q, qd, zero, 0.0, mass, length, com, inertia, payload)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"mass matrix not positive definite at q={q}: {M}") from exc
    return M, c, g


def rigid_inverse_dynamics(cfg: ArmConfig, q, qd, qdd, mass_factor: float = 1.0, payload: float = 0.0):
    """Torque a rigid arm (motor inertia and damping lumped onto the link) needs."""
    q, qd, qdd = (np.asarray(v, dtype=float) for v in (q, qd, qdd))
    tau = _rnea(q, qd, qdd, cfg.gravity, cfg.arr("link_mass") * mass_factor, cfg.arr("link_length"),
                cfg.arr("com"), cfg.arr("link_inertia") * mass_factor, payload)
    return tau + cfg.arr("motor_inertia") * qdd + (cfg.arr("link_damping") + cfg.arr("motor_damping")) * qd


def controller_feedforward(cfg: ArmConfig, cq, cqd, cqdd):
    return _feedforward(np.atleast_2d(np.asarray(cq, dtype=float)), np.atleast_2d(np.asarray(cqd, dtype=float)),
                        np.atleast_2d(np.asarray(cqdd, dtype=float)), cfg.gravity,
                        cfg.arr("link_mass") * cfg.model_error, cfg.arr("link_length"), cfg.arr("com"),
                        cfg.arr("link_inertia") * cfg.model_error, cfg.arr("motor_inertia"),
                        cfg.arr("link_damping") + cfg.arr("motor_damping"))


def inner_loop_control(cfg: ArmConfig, state: SimState, q_cmd, qd_cmd, qdd_cmd):
    """Model-based feed-forward plus PD: proportional on link angle, damping on motor speed."""
    ff = controller_feedforward(cfg, q_cmd, qd_cmd, qdd_cmd)[0]
    tau = ff + cfg.arr("kp") * (np.asarray(q_cmd) - state.q) + cfg.arr("kd") * (np.asarray(qd_cmd) - state.theta_m_dot)
    clipped = np.clip(tau, -cfg.torque_limit, cfg.torque_limit)
    if np.any(clipped != tau):
        log.warning("motor torque clamped to +-%.1f Nm", cfg.torque_limit)
    return clipped


def step_dynamics(cfg: ArmConfig, state: SimState, motor_torque, dt: float | None = None) -> SimState:
    tau = np.asarray(motor_torque, dtype=float)
    clipped = np.clip(tau, -cfg.torque_limit, cfg.torque_limit)
    if np.any(clipped != tau):
        log.warning("motor torque clamped to +-%.1f Nm", cfg.torque_limit)
    x = _rk4(state.vector(), clipped, cfg.sim_dt if dt is None else dt, *_plant_args(cfg, state.payload))
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"simulation diverged; last valid state {state}")
    return SimState.from_vector(x, state.payload)


def total_energy(cfg: ArmConfig, state: SimState) -> float:
    """Kinetic + elastic + gravitational energy (potential zero at y=0)."""
    M, _, _ = dynamics_terms(cfg, state.q, state.qd, state.payload)
    kinetic = 0.5 * state.qd @ M @ state.qd + 0.5 * np.sum(cfg.arr("motor_inertia") * state.theta_m_dot**2)
    elastic = 0.5 * np.sum(cfg.arr("stiffness") * (state.theta_m - state.q) ** 2)
    phi = np.cumsum(state.q)
    length, com, mass = cfg.arr("link_length"), cfg.arr("com"), cfg.arr("link_mass")
    base_y = np.concatenate([[0.0], np.cumsum(length * np.sin(phi))[:-1]])
    y_com = base_y + com * np.sin(phi)
    y_tip = np.sum(length * np.sin(phi))
    potential = cfg.gravity * (np.sum(mass * y_com) + state.payload * y_tip)
    return float(kinetic + elastic + potential)


def forward_kinematics(cfg: ArmConfig, q) -> np.ndarray:
    """Tip position ``(x, y)`` in metres; accepts ``(N,)`` or ``(T, N)`` angles."""
    q = np.asarray(q, dtype=float)
    phi = np.cumsum(q, axis=-1)
    length = cfg.arr("link_length")
    return np.stack([np.sum(length * np.cos(phi), axis=-1), np.sum(length * np.sin(phi), axis=-1)], axis=-1)


def equilibrium_state(cfg: ArmConfig, q_cmd, payload: float = 0.0) -> SimState:
    """Static rest state the inner loop settles to while holding ``q_cmd``."""
    q_cmd = np.asarray(q_cmd, dtype=float)
    mass, length, com, inertia = (cfg.arr(k) for k in ("link_mass", "link_length", "com", "link_inertia"))
    zero = np.zeros_like(q_cmd)
    g_hat = controller_feedforward(cfg, q_cmd, zero, zero)[0]
    kp = cfg.arr("kp")
    q = q_cmd.copy()
    for _ in range(1000):
        g = _rnea(q, zero, zero, cfg.gravity, mass, length, com, inertia, payload)
        q_new = q_cmd + (g_hat - g) / kp
        if np.max(np.abs(q_new - q)) < 1e-15:
            q = q_new
            break
        q = q_new
    g = _rnea(q, zero, zero, cfg.gravity, mass, length, com, inertia, payload)
    return SimState(q, zero.copy(), q + g / cfg.arr("stiffness"), zero.copy(), payload)


def execute_trajectory(cfg: ArmConfig, commands: Trajectory, payload: float = 0.0,
                       desired: Trajectory | None = None, hold_cap: float = HOLD_CAP,
                       max_speed: float = 0.0, seed: int | None = None) -> ExecutionRecord:
    """Stream ``commands`` at 20 Hz through the inner loop and record the response.

    ``desired`` (default: the commands) defines the nominal trajectory the
    response is compared with. Once the commands run out the last one is held;
    the run stops when the arm has settled at the final desired point or
    ``hold_cap`` seconds after the nominal end.
    """
    if len(commands) == 0:
        raise ValueError("empty command trajectory")
    desired = commands if desired is None else desired
    if abs(commands.dt - cfg.command_dt) > 1e-12:
        raise ValueError("commands must be sampled at the configured command rate")
    cq = commands.positions
    cqd = commands.velocities
    cqdd = commands.accelerations if commands.accelerations is not None else np.zeros_like(cq)
    if not (np.all(np.isfinite(cq)) and np.all(np.isfinite(cqd)) and np.all(np.isfinite(cqdd))):
        raise ValueError("non-finite command")
    n_nominal = len(desired)
    n_hold = int(round(hold_cap / cfg.command_dt))
    max_samples = max(n_nominal + n_hold, len(commands))
    ff = controller_feedforward(cfg, cq, cqd, cqdd)
    x0 = equilibrium_state(cfg, cq[0], payload).vector()
    goal = desired.positions[-1]
    xs, n_rec, clamped, failed = _simulate(
        cq, cqd, ff, x0, goal, n_nominal, max_samples, cfg.substeps, cfg.sim_dt,
        *_plant_args(cfg, payload), cfg.arr("kp"), cfg.arr("kd"), cfg.torque_limit, cfg.pos_tol, cfg.vel_tol)
    if failed:
        raise FloatingPointError(f"simulation diverged after {n_rec - 1} samples; "
                                 f"last valid state {xs[n_rec - 1]}")
    if clamped:
        log.warning("motor torque clamped in %d integrator steps", clamped)
    xs = xs[:n_rec]
    n = cfg.n_joints
    q, qd = xs[:, :n].copy(), xs[:, n:2 * n].copy()
    actual = Trajectory(q, qd, spline_acceleration(qd, cfg.command_dt) if n_rec >= 4 else np.zeros_like(q),
                        cfg.command_dt)
    des = desired.extended(0, max(0, n_rec - n_nominal)).slice(0, n_rec)
    if des.accelerations is None:
        des.accelerations = np.zeros_like(des.positions)
    converged = bool(np.all(np.abs(q[-1] - goal) < cfg.pos_tol) and np.all(np.abs(qd[-1]) < cfg.vel_tol))
    return ExecutionRecord(des, actual, n_nominal, max_speed, payload, seed,
                           converged=converged and n_rec >= n_nominal,
                           commands=commands)
