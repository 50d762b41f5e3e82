import numpy as np
import pytest

from hypermpc._kernels import aug_forward
from hypermpc.dynamics import COULOMB_SMOOTHING
from hypermpc.ocp import (LinearShooting, MPCConfig, PendulumShooting, SwingUpCost,
                          riccati_lqr, solve, wrap_pi)

THETA = np.array([1.0, 0.5, 0.05, 1e-3, 1.0])
CFG = MPCConfig()


class QuadCost:
    """Plain quadratic cost for the linear-dynamics oracle check."""

    def __init__(self, q, r, q_term):
        self.q = q
        self.r = r
        self.q_term = q_term

    def stage(self, xs, us):
        xs = np.atleast_2d(xs)
        return np.einsum("ni,ij,nj->n", xs, self.q, xs) + self.r * np.square(us)

    def terminal(self, x):
        return float(x @ self.q_term @ x)

    def total(self, xs, us):
        return float(self.stage(xs[:-1], us).sum() + self.terminal(xs[-1]))

    def stage_derivatives(self, xs, us):
        n = len(us)
        lx = 2.0 * xs @ self.q
        lu = 2.0 * self.r * us
        lxx = np.tile(2.0 * self.q, (n, 1, 1))
        luu = np.full(n, 2.0 * self.r)
        return lx, lu, lxx, luu

    def terminal_derivatives(self, x):
        return 2.0 * self.q_term @ x, 2.0 * self.q_term


def test_stage_cost_reference_point():
    cost = SwingUpCost(CFG)
    assert cost.stage(np.array([[np.pi, 0.0, 0.0]]), np.zeros(1))[0] == 0.0


def test_stage_cost_hanging_down():
    cost = SwingUpCost(CFG)
    val = cost.stage(np.array([[0.0, 0.0, 0.0]]), np.zeros(1))[0]
    np.testing.assert_allclose(val, np.pi ** 2, rtol=1e-12)


def test_terminal_is_ten_times_stage():
    cost = SwingUpCost(CFG)
    x = np.array([0.7, -0.4, 0.2])
    np.testing.assert_allclose(cost.terminal(x),
                               10.0 * cost.stage(x[None], np.zeros(1))[0], rtol=1e-12)
    assert cost.terminal(np.array([np.pi, 0.0, 0.0])) == 0.0


def test_cost_wraps_angle_error():
    cost = SwingUpCost(CFG)
    a = cost.stage(np.array([[np.pi + 0.1, 0.0, 0.0]]), np.zeros(1))[0]
    b = cost.stage(np.array([[-np.pi + 0.1, 0.0, 0.0]]), np.zeros(1))[0]
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_allclose(a, 0.1 ** 2, rtol=1e-9)


def test_torque_penalty_active_beyond_bound():
    cost = SwingUpCost(CFG)
    inside = cost.stage(np.array([[np.pi, 0.0, 0.9]]), np.zeros(1))[0]
    outside = cost.stage(np.array([[np.pi, 0.0, 1.1]]), np.zeros(1))[0]
    assert outside > inside + 1e3 * 0.1 ** 2 * 0.5


def test_ilqr_matches_riccati_on_lqr_problem():
    # 2-state discrete double integrator, no bounds: iLQR must land on the
    # Riccati feedback law's trajectory
    dt = 0.1
    a = np.array([[1.0, dt], [0.0, 1.0]])
    b = np.array([0.5 * dt * dt, dt])
    q = np.diag([1.0, 0.1])
    r = 0.5
    qf = 10.0 * q
    n = 30
    x0 = np.array([1.3, -0.4])
    gains = riccati_lqr(a, b, q, r, qf, n)
    xs_ref = np.zeros((n + 1, 2))
    us_ref = np.zeros(n)
    xs_ref[0] = x0
    for k in range(n):
        us_ref[k] = -gains[k] @ xs_ref[k]
        xs_ref[k + 1] = a @ xs_ref[k] + b * us_ref[k]
    sol = solve(LinearShooting(a, b, n), QuadCost(q, r, qf), x0, np.zeros(n))
    assert sol.converged
    np.testing.assert_allclose(sol.controls, us_ref, atol=1e-6)
    np.testing.assert_allclose(sol.states, xs_ref, atol=1e-6)


def test_already_at_goal():
    n = CFG.horizon_steps
    shooting = PendulumShooting(np.tile(THETA, (n, 1)), CFG.control_dt, 9.81, CFG.rate_bound)
    sol = solve(shooting, SwingUpCost(CFG), np.array([np.pi, 0.0, 0.0]), np.zeros(n))
    assert sol.converged
    assert sol.cost <= 1e-6
    assert np.abs(sol.controls).max() <= 1e-3


def test_solution_dynamics_consistency_and_descent():
    n = CFG.horizon_steps
    cost = SwingUpCost(CFG)
    shooting = PendulumShooting(np.tile(THETA, (n, 1)), CFG.control_dt, 9.81, CFG.rate_bound)
    x0 = np.array([0.2, 0.0, 0.0])
    warm = np.zeros(n)
    xs_w, us_w, _ = shooting.rollout(x0, np.zeros((n, 3)), warm, np.zeros(n),
                                     np.zeros((n, 3)), 0.0)
    warm_cost = cost.total(xs_w, us_w)
    sol = solve(shooting, cost, x0, warm)
    assert sol.converged
    assert sol.cost <= warm_cost
    # re-simulating the returned controls open loop reproduces the states
    xs_re, us_re, ok = shooting.rollout(x0, np.zeros((n, 3)), sol.controls,
                                        np.zeros(n), np.zeros((n, 3)), 0.0)
    assert ok
    np.testing.assert_allclose(xs_re, sol.states, atol=1e-9)
    np.testing.assert_array_equal(us_re, sol.controls)


def test_control_bound_respected():
    n = 60
    cfg = MPCConfig(horizon_steps=n)
    shooting = PendulumShooting(np.tile(THETA, (n, 1)), cfg.control_dt, 9.81, cfg.rate_bound)
    sol = solve(shooting, SwingUpCost(cfg), np.array([0.0, 0.0, 0.0]), np.zeros(n))
    assert np.abs(sol.controls).max() <= cfg.rate_bound + 1e-12


def test_numerical_failure_reported():
    n = 10
    theta = np.tile(THETA, (n, 1))
    theta[:, 0] = 1e-15  # absurd mass blows up the rollout
    shooting = PendulumShooting(theta, 0.02, 9.81, 10.0)
    sol = solve(shooting, SwingUpCost(CFG), np.array([0.5, 0.0, 0.0]), np.full(10, 10.0))
    assert not sol.converged
    assert sol.failure_reason == "numerical"


def test_wrap_pi():
    np.testing.assert_allclose(wrap_pi(np.array([0.0, np.pi, -np.pi, 3 * np.pi])),
                               [0.0, np.pi, np.pi, np.pi])
