import logging

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from flexjoint.sim import (ArmConfig, SimState, dynamics_terms, equilibrium_state, execute_trajectory,
                           forward_kinematics, inner_loop_control, step_dynamics, total_energy)
from flexjoint.trajectory import Trajectory, generate_functional_trajectory, quintic_through_waypoints
from flexjoint.pipeline import cumulative_error

CFG = ArmConfig()


def com_positions(cfg, q, payload=False):
    """Independent planar kinematics: centre of mass of every link (and the tip)."""
    phi = np.cumsum(q)
    pts, base = [], np.zeros(2)
    for i in range(cfg.n_joints):
        d = np.array([np.cos(phi[i]), np.sin(phi[i])])
        pts.append(base + cfg.com[i] * d)
        base = base + cfg.link_length[i] * d
    return np.array(pts), base


def energy_mass_matrix(cfg, q, payload=0.0, eps=1e-6):
    """M = sum_i m_i J_i^T J_i + I_i s_i s_i^T with Jacobians by central differences."""
    n = cfg.n_joints
    J = np.zeros((n, 2, n))
    Jtip = np.zeros((2, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        (pp, tp), (pm, tm) = com_positions(cfg, q + e), com_positions(cfg, q - e)
        J[:, :, k] = (pp - pm) / (2 * eps)
        Jtip[:, k] = (tp - tm) / (2 * eps)
    M = payload * Jtip.T @ Jtip
    for i in range(n):
        s = (np.arange(n) <= i).astype(float)
        M += cfg.link_mass[i] * J[i].T @ J[i] + cfg.link_inertia[i] * np.outer(s, s)
    return M


def test_mass_matrix_symmetric_pd_on_1000_states():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        M, _, _ = dynamics_terms(CFG, rng.uniform(-np.pi, np.pi, 3), rng.normal(size=3), rng.uniform(0, 2))
        assert np.abs(M - M.T).max() < 1e-12
        np.linalg.cholesky(M)


@pytest.mark.parametrize("payload", [0.0, 0.7])
def test_mass_matrix_matches_energy_oracle(payload):
    rng = np.random.default_rng(1)
    for _ in range(5):
        q = rng.uniform(-np.pi, np.pi, 3)
        M, _, _ = dynamics_terms(CFG, q, np.zeros(3), payload)
        np.testing.assert_allclose(M, energy_mass_matrix(CFG, q, payload), atol=1e-6)


def test_single_link_closed_form():
    cfg = ArmConfig(n_joints=1, link_mass=1.5, link_length=0.4, com=0.15, link_inertia=0.03)
    for q in (-1.0, 0.3, 2.0):
        M, c, g = dynamics_terms(cfg, [q], [0.8])
        assert M[0, 0] == pytest.approx(0.03 + 1.5 * 0.15**2, rel=1e-14)
        assert g[0] == pytest.approx(1.5 * 9.81 * 0.15 * np.cos(q), rel=1e-14)
        assert c[0] == pytest.approx(0.0, abs=1e-14)


def test_zero_gravity_at_rest():
    cfg = ArmConfig(gravity=0.0)
    _, c, g = dynamics_terms(cfg, [0.3, -0.2, 0.5], np.zeros(3))
    assert not np.abs(c).max() > 1e-15 and not np.abs(g).max() > 1e-15


def test_coriolis_vanishes_at_zero_velocity_and_gravity_is_velocity_free():
    rng = np.random.default_rng(2)
    q = rng.normal(size=3)
    _, c0, g0 = dynamics_terms(CFG, q, np.zeros(3))
    _, c1, g1 = dynamics_terms(CFG, q, rng.normal(size=3))
    assert np.abs(c0).max() < 1e-14
    np.testing.assert_array_equal(g0, g1)


def test_rest_without_torque_or_gravity_is_fixed_point():
    cfg = ArmConfig(gravity=0.0)
    s = SimState(np.array([0.2, -0.1, 0.4]), np.zeros(3), np.array([0.2, -0.1, 0.4]), np.zeros(3))
    s2 = step_dynamics(cfg, s, np.zeros(3))
    np.testing.assert_array_equal(s2.vector(), s.vector())


def test_undamped_swing_conserves_energy():
    cfg = ArmConfig(link_damping=0.0, motor_damping=0.0)
    s = SimState(np.array([0.5, -0.3, 0.2]), np.zeros(3), np.array([0.5, -0.3, 0.2]), np.zeros(3))
    e0 = total_energy(cfg, s)
    energies = [e0]
    for _ in range(1000):
        s = step_dynamics(cfg, s, np.zeros(3))
        energies.append(total_energy(cfg, s))
    assert e0 > 1.0
    assert np.abs(np.array(energies) - e0).max() / e0 < 1e-3


def test_passivity_with_damping():
    s = SimState(np.array([0.5, -0.3, 0.2]), np.array([1.0, 0.0, -1.0]), np.array([0.4, -0.3, 0.3]), np.zeros(3))
    e = total_energy(CFG, s)
    for _ in range(500):
        s = step_dynamics(CFG, s, np.zeros(3))
        e_new = total_energy(CFG, s)
        assert e_new <= e + 1e-6
        e = e_new


def test_stiff_joint_tracks_rigid_model():
    cfg = ArmConfig(stiffness=1e6, sim_dt=1e-4)
    n = 3
    q0 = np.array([0.2, -0.4, 0.3])
    torque = lambda t: np.array([12.0, 4.0, 1.0]) + 2.0 * np.sin(4 * t)
    _, _, g = dynamics_terms(cfg, q0, np.zeros(n))
    s = SimState(q0.copy(), np.zeros(n), q0 + g / cfg.arr("stiffness"), np.zeros(n))
    J = cfg.arr("motor_inertia")
    damping = cfg.arr("link_damping") + cfg.arr("motor_damping")

    def rigid(t, x):
        q, qd = x[:n], x[n:]
        M, c, gq = dynamics_terms(cfg, q, qd)
        return np.concatenate([qd, np.linalg.solve(M + np.diag(J), torque(t) - c - gq - damping * qd)])

    T = 0.5
    ref = solve_ivp(rigid, (0, T), np.concatenate([q0, np.zeros(n)]), rtol=1e-10, atol=1e-12,
                    dense_output=True)
    steps = int(round(T / cfg.sim_dt))
    worst = 0.0
    for k in range(steps):
        # zero-order hold on torque, like the inner loop
        s = step_dynamics(cfg, s, torque(k * cfg.sim_dt + cfg.sim_dt / 2))
        if (k + 1) % 100 == 0:
            worst = max(worst, np.abs(s.q - ref.sol((k + 1) * cfg.sim_dt)[:n]).max())
    assert worst < 1e-3


def test_forward_kinematics_examples():
    assert forward_kinematics(CFG, np.zeros(3)) == pytest.approx([1.05, 0.0])
    one = ArmConfig(n_joints=1, link_length=0.5)
    assert forward_kinematics(one, [np.pi / 2]) == pytest.approx([0.0, 0.5], abs=1e-15)


def test_forward_kinematics_matches_transform_chain():
    rng = np.random.default_rng(3)
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 3)
        H = np.eye(3)
        for qi, li in zip(q, CFG.link_length):
            c, s = np.cos(qi), np.sin(qi)
            H = H @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]) @ np.array([[1, 0, li], [0, 1, 0], [0, 0, 1]])
        np.testing.assert_allclose(forward_kinematics(CFG, q), H[:2, 2], atol=1e-12)


def test_controller_at_rest_outputs_gravity_model():
    q = np.array([0.3, -0.2, 0.1])
    s = SimState(q, np.zeros(3), q.copy(), np.zeros(3))
    perfect = ArmConfig(model_error=1.0)
    _, _, g = dynamics_terms(perfect, q, np.zeros(3))
    np.testing.assert_allclose(inner_loop_control(perfect, s, q, np.zeros(3), np.zeros(3)), g, atol=1e-12)


def test_controller_exact_inverse_dynamics_with_perfect_model():
    perfect = ArmConfig(model_error=1.0)
    rng = np.random.default_rng(4)
    q, qd, qdd = rng.normal(size=(3, 3))
    s = SimState(q, qd, q.copy(), qd.copy())
    M, c, g = dynamics_terms(perfect, q, qd)
    expected = (M + np.diag(perfect.arr("motor_inertia"))) @ qdd + c + g \
        + (perfect.arr("link_damping") + perfect.arr("motor_damping")) * qd
    np.testing.assert_allclose(inner_loop_control(perfect, s, q, qd, qdd), expected, atol=1e-10)


def test_torque_clamp_warns(caplog):
    s = SimState(np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3))
    with caplog.at_level(logging.WARNING):
        step_dynamics(CFG, s, np.array([1e4, 0, 0]))
    assert "clamped" in caplog.text


def test_constant_command_at_hanging_equilibrium():
    q = np.array([-np.pi / 2, 0.0, 0.0])
    cmd = Trajectory(np.tile(q, (40, 1)), np.zeros((40, 3)), np.zeros((40, 3)))
    rec = execute_trajectory(CFG, cmd)
    assert np.abs(rec.actual.positions[:40] - q).max() < 1e-6


def test_zero_length_command_rejected():
    with pytest.raises(ValueError):
        execute_trajectory(CFG, Trajectory(np.zeros((0, 3)), np.zeros((0, 3))))


def test_execution_has_positive_error_and_hold():
    traj = generate_functional_trajectory(np.random.default_rng(5), 3, 1.0)
    rec = execute_trajectory(CFG, traj)
    assert len(rec) > rec.n_nominal
    assert rec.actual.accelerations is not None
    nom = rec.nominal()
    assert cumulative_error(nom.desired.positions, nom.actual.positions) > 0.005


def test_execution_is_deterministic():
    traj = generate_functional_trajectory(np.random.default_rng(6), 3, 0.8)
    a, b = execute_trajectory(CFG, traj), execute_trajectory(CFG, traj)
    assert a.actual.positions.tobytes() == b.actual.positions.tobytes()
    assert a.actual.accelerations.tobytes() == b.actual.accelerations.tobytes()


def test_equilibrium_state_is_static():
    s = equilibrium_state(CFG, np.array([0.4, 0.2, -0.5]))
    tau = inner_loop_control(CFG, s, np.array([0.4, 0.2, -0.5]), np.zeros(3), np.zeros(3))
    s2 = step_dynamics(CFG, s, tau)
    assert np.abs(s2.vector() - s.vector()).max() < 1e-9


def fixed_paths(n=10):
    rng = np.random.default_rng(7)
    return [rng.uniform(-1.0, 1.0, size=(2, 3)) for _ in range(n)]


def test_baseline_error_grows_with_speed():
    # below ~0.4 rad/s static sag dominates and neighbouring speeds tie
    paths = fixed_paths()
    errs = []
    for speed in (0.2, 0.6, 1.0):
        e = []
        for w in paths:
            rec = execute_trajectory(CFG, quintic_through_waypoints(w, speed)).nominal()
            e.append(cumulative_error(rec.desired.positions, rec.actual.positions))
        errs.append(np.mean(e))
    assert all(b > a for a, b in zip(errs, errs[1:])), errs


def test_payload_increases_baseline_error():
    rng = np.random.default_rng(8)
    trajs = [generate_functional_trajectory(rng, 3, 1.0) for _ in range(20)]

    def mean_err(payload):
        out = []
        for t in trajs:
            rec = execute_trajectory(CFG, t, payload=payload).nominal()
            out.append(cumulative_error(rec.desired.positions, rec.actual.positions))
        return np.mean(out)

    assert mean_err(1.1) > mean_err(0.0)
