"""Trajectory optimization: iLQR over the torque-rate-controlled pendulum.

The optimal-control state is (q, q_dot, tau) with control u = tau_dot; per
node, tau advances first (tau' = tau + dt*u) and (q, q_dot) then take one RK4
step under tau' and that node's parameter vector. Control bounds are enforced
by clamping in the forward pass; the torque state bound enters as a quadratic
penalty. The solver is generic over a dynamics provider so a plain linear
system can be solved for oracle checks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .dynamics import COULOMB_SMOOTHING


@dataclass
class MPCConfig:
    horizon_steps: int = 125
    control_dt: float = 0.02
    q_angle: float = 1.0
    q_vel: float = 0.1
    q_tau: float = 0.001
    r_rate: float = 1e-8
    terminal_scale: float = 10.0
    tau_bound: float = 1.0
    rate_bound: float = 10.0
    tau_penalty: float = 1e3
    episodes: int = 20
    duration: float = 10.0
    seed: int = 0
    success_angle: float = 0.1
    success_vel: float = 0.5
    success_window: float = 1.0
    max_iterations: int = 100
    tol: float = 1e-6
    # above this solution cost the loop also tries resonant primer warm starts
    primer_cost_threshold: float = 150.0

    @property
    def horizon_seconds(self) -> float:
        return self.horizon_steps * self.control_dt

    def replace(self, **kw) -> "MPCConfig":
        return replace(self, **kw)


@dataclass
class Solution:
    states: np.ndarray      # [N+1, n_x]
    controls: np.ndarray    # [N]
    cost: float
    iterations: int
    converged: bool
    failure_reason: str | None = None


def wrap_pi(x):
    """Wrap to (-pi, pi]."""
    return x - 2.0 * np.pi * np.ceil((x - np.pi) / (2.0 * np.pi))


class SwingUpCost:
    """Wrapped quadratic swing-up cost with a soft torque-magnitude penalty."""

    def __init__(self, cfg: MPCConfig):
        self.q = np.array([cfg.q_angle, cfg.q_vel, cfg.q_tau])
        self.r = cfg.r_rate
        self.x_ref = np.array([np.pi, 0.0, 0.0])
        self.terminal_scale = cfg.terminal_scale
        self.tau_bound = cfg.tau_bound
        self.penalty = cfg.tau_penalty

    def _error(self, xs):
        e = np.atleast_2d(xs) - self.x_ref
        e[:, 0] = wrap_pi(e[:, 0])
        return e

    def _tau_excess(self, xs):
        tau = np.atleast_2d(xs)[:, 2]
        return np.maximum(np.abs(tau) - self.tau_bound, 0.0), np.sign(tau)

    def stage(self, xs, us):
        e = self._error(xs)
        exc, _ = self._tau_excess(xs)
        return (e * e) @ self.q + self.r * np.square(us) + self.penalty * exc * exc

    def terminal(self, x):
        e = self._error(x)[0]
        return self.terminal_scale * float((e * e) @ self.q)

    def total(self, xs, us) -> float:
        return float(self.stage(xs[:-1], us).sum() + self.terminal(xs[-1]))

    def stage_derivatives(self, xs, us):
        n = len(us)
        e = self._error(xs)
        exc, sign = self._tau_excess(xs)
        lx = 2.0 * e * self.q
        lx[:, 2] += 2.0 * self.penalty * exc * sign
        lu = 2.0 * self.r * us
        lxx = np.tile(np.diag(2.0 * self.q), (n, 1, 1))
        lxx[:, 2, 2] += 2.0 * self.penalty * (exc > 0)
        luu = np.full(n, 2.0 * self.r)
        return lx, lu, lxx, luu

    def terminal_derivatives(self, x):
        e = self._error(x)[0]
        vx = 2.0 * self.terminal_scale * e * self.q
        vxx = np.diag(2.0 * self.terminal_scale * self.q)
        return vx, vxx


class PendulumShooting:
    """Discrete dynamics provider over a per-node parameter sequence."""

    def __init__(self, theta_seq: np.ndarray, dt: float, gravity: float, rate_bound: float):
        self.theta = np.ascontiguousarray(theta_seq, dtype=np.float64)
        self.dt = dt
        self.gravity = gravity
        self.rate_bound = rate_bound
        self.n = len(self.theta)

    def rollout(self, x0, xs_ref, us_ref, kff, kfb, alpha):
        return _kernels.aug_forward(x0, xs_ref, us_ref, kff, kfb, alpha, self.theta,
                                    self.dt, self.gravity, COULOMB_SMOOTHING, self.rate_bound)

    def linearize(self, xs, us):
        return _kernels.aug_linearize(xs, us, self.theta, self.dt, self.gravity,
                                      COULOMB_SMOOTHING)


class LinearShooting:
    """x' = A x + B u with clamped scalar control; for solver oracle tests."""

    def __init__(self, a: np.ndarray, b: np.ndarray, n: int, rate_bound: float = np.inf):
        self.a = a
        self.b = b
        self.n = n
        self.rate_bound = rate_bound

    def rollout(self, x0, xs_ref, us_ref, kff, kfb, alpha):
        nx = len(x0)
        xs = np.zeros((self.n + 1, nx))
        us = np.zeros(self.n)
        xs[0] = x0
        for k in range(self.n):
            u = us_ref[k] + alpha * kff[k] + kfb[k] @ (xs[k] - xs_ref[k])
            u = float(np.clip(u, -self.rate_bound, self.rate_bound))
            us[k] = u
            xs[k + 1] = self.a @ xs[k] + self.b * u
            if not np.all(np.isfinite(xs[k + 1])):
                return xs, us, False
        return xs, us, True

    def linearize(self, xs, us):
        return (np.tile(self.a, (self.n, 1, 1)), np.tile(self.b, (self.n, 1)))


def solve(dynamics, cost, x0, us_init, max_iterations: int = 100, tol: float = 1e-6,
          mu_max: float = 1e10) -> Solution:
    """Iterative LQR with Levenberg-Marquardt regularization and line search.

    Converges when an accepted step decreases the cost by less than `tol`
    (or at the iteration cap). Non-finite rollouts yield failure_reason
    'numerical'; running out of regularization headroom yields 'stalled'.
    """
    n = dynamics.n
    nx = len(x0)
    zeros_ref = np.zeros((n, nx))
    zero_k = np.zeros(n)
    zero_kfb = np.zeros((n, nx))
    xs, us, ok = dynamics.rollout(x0, zeros_ref, np.asarray(us_init, dtype=np.float64),
                                  zero_k, zero_kfb, 0.0)
    if not ok:
        return Solution(xs, us, np.inf, 0, False, "numerical")
    cost_now = cost.total(xs, us)
    if not np.isfinite(cost_now):
        return Solution(xs, us, cost_now, 0, False, "numerical")
    mu = 0.0
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        a_mats, b_mats = dynamics.linearize(xs[:n], us)
        passed, kff, kfb, expected = _backward_pass(cost, xs, us, a_mats, b_mats, mu)
        if not passed:
            mu = 1e-6 if mu == 0.0 else mu * 10.0
            if mu > mu_max:
                return Solution(xs, us, cost_now, iterations, False, "stalled")
            continue
        if expected < tol:
            # stationary under the current model: nothing left to gain
            break
        accepted = False
        for alpha in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125):
            xs_new, us_new, ok = dynamics.rollout(x0, xs[:n], us, kff, kfb, alpha)
            if not ok:
                continue
            cost_new = cost.total(xs_new, us_new)
            if np.isfinite(cost_new) and cost_new < cost_now:
                decrease = cost_now - cost_new
                xs, us, cost_now = xs_new, us_new, cost_new
                mu = 0.0 if mu <= 1e-6 else mu / 10.0
                accepted = True
                break
        if accepted:
            if decrease < tol:
                break
        else:
            mu = 1e-6 if mu == 0.0 else mu * 10.0
            if mu > mu_max:
                return Solution(xs, us, cost_now, iterations, False, "stalled")
    return Solution(xs, us, cost_now, iterations, True, None)


def _backward_pass(cost, xs, us, a_mats, b_mats, mu):
    n = len(us)
    nx = xs.shape[1]
    lx, lu, lxx, luu = cost.stage_derivatives(xs[:n], us)
    vx, vxx = cost.terminal_derivatives(xs[n])
    if nx == 3:
        ok, kff, kfb, dv1, dv2 = _kernels.ilqr_backward_3(
            a_mats, b_mats, lx, lu, lxx, luu, vx, vxx, mu)
        return ok, kff, kfb, -(dv1 + dv2)
    kff = np.zeros(n)
    kfb = np.zeros((n, nx))
    dv1 = 0.0
    dv2 = 0.0
    for k in range(n - 1, -1, -1):
        a = a_mats[k]
        b = b_mats[k]
        qx = lx[k] + a.T @ vx
        qu = lu[k] + b @ vx
        vxx_b = vxx @ b
        qxx = lxx[k] + a.T @ vxx @ a
        quu = luu[k] + b @ vxx_b + mu
        qux = b @ vxx @ a
        if quu <= 1e-12:
            return False, kff, kfb, 0.0
        kf = -qu / quu
        kb = -qux / quu
        kff[k] = kf
        kfb[k] = kb
        dv1 += kf * qu
        dv2 += 0.5 * kf * quu * kf
        vx = qx + kb * (quu * kf) + kb * qu + qux * kf
        vxx = qxx + np.outer(kb, kb) * quu + np.outer(kb, qux) + np.outer(qux, kb)
        vxx = 0.5 * (vxx + vxx.T)
    # expected full-step cost decrease -(dv1 + dv2)
    return True, kff, kfb, -(dv1 + dv2)


def riccati_lqr(a, b, q, r, q_term, n):
    """Finite-horizon discrete LQR feedback gains (independent oracle).

    Returns gains K[k] with u_k = -K[k] x_k for x' = A x + B u and cost
    sum x^T Q x + u^T R u plus terminal x^T Qf x.
    """
    p = q_term.copy()
    gains = np.zeros((n, len(a)))
    for k in range(n - 1, -1, -1):
        s = r + b @ p @ b
        gains[k] = (b @ p @ a) / s
        acl = a - np.outer(b, gains[k])
        p = q + gains[k][:, None] * r * gains[k][None, :] + acl.T @ p @ acl
        p = 0.5 * (p + p.T)
    return gains
