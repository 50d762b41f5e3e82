"""Parameterized pendulum dynamics and differentiable multi-step rollouts.

The nominal model is the gear-driven rigid pendulum with smoothed Coulomb
friction; its five parameters (mass, length, viscous friction, Coulomb
friction, gear ratio) can vary over a prediction horizon as a
:class:`ParamTrajectory` - a clamped cubic spline over multiplicative
deviations from a nominal vector, so every evaluated parameter stays inside
theta_const * (1 +- delta_max) and the trajectory returns exactly theta_const
beyond its horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autodiff as ad
from .bsplines import KnotVector, basis_matrix

COULOMB_SMOOTHING = 0.05
PARAM_NAMES = ("mass", "length", "viscous_friction", "coulomb_friction", "gear_ratio")


class RolloutDiverged(RuntimeError):
    """A model rollout left the finite-state envelope."""

    def __init__(self, step: int):
        super().__init__(f"rollout diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class PendulumParams:
    mass: float
    length: float
    viscous_friction: float
    coulomb_friction: float
    gear_ratio: float

    def __post_init__(self):
        if self.mass <= 0 or self.length <= 0:
            raise ValueError(f"mass and length must be positive: {self}")
        if self.viscous_friction < 0 or self.coulomb_friction < 0:
            raise ValueError(f"frictions must be non-negative: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.mass, self.length, self.viscous_friction,
                         self.coulomb_friction, self.gear_ratio])

    @classmethod
    def from_array(cls, arr) -> "PendulumParams":
        return cls(*(float(v) for v in arr))


def nominal_accel(q, q_dot, tau, theta, gravity=9.81):
    """Angular acceleration of the nominal model; fully vectorized.

    theta is an array whose last axis holds the five parameters.
    """
    theta = np.asarray(theta, dtype=np.float64)
    m, l, cv, cc, gr = (theta[..., i] for i in range(5))
    inertia = m * l * l / 3.0
    torque = (gr * tau - cv * q_dot - cc * np.tanh(q_dot / COULOMB_SMOOTHING)
              - m * gravity * (l / 2.0) * np.sin(q))
    return torque / inertia


def nominal_derivative(state, tau, params: PendulumParams, gravity=9.81):
    """d/dt (q, q_dot) for a constant parameter vector."""
    q, q_dot = state
    return np.array([q_dot, float(nominal_accel(q, q_dot, tau, params.as_array(), gravity))])


class ParamTrajectory:
    """Bounded time-varying model parameters over [0, t_p].

    Stores multiplicative deviations d(t) per channel as a clamped cubic
    spline; the evaluated parameters are theta_const * (1 + d(t)), and by the
    spline convex hull |d| never exceeds delta_max when the deviation control
    points honor that bound. Beyond t_p the deviation is identically zero, so
    sampling returns theta_const exactly.
    """

    def __init__(self, theta_const, dev_points, t_p: float, delta_max: float):
        self.theta_const = np.asarray(theta_const, dtype=np.float64)
        self.dev_points = np.asarray(dev_points, dtype=np.float64)
        if self.dev_points.ndim != 2 or self.dev_points.shape[1] != 5:
            raise ValueError(f"deviation control points must be [n, 5], got {self.dev_points.shape}")
        self.t_p = float(t_p)
        self.delta_max = float(delta_max)
        self.knots = KnotVector.clamped_uniform(3, self.dev_points.shape[0], 0.0, self.t_p)

    @classmethod
    def constant(cls, theta_const, t_p: float = 2.5, num_points: int = 25,
                 delta_max: float = 0.0) -> "ParamTrajectory":
        return cls(theta_const, np.zeros((num_points, 5)), t_p, delta_max)

    @property
    def control_points(self) -> np.ndarray:
        """Effective parameter control points theta_const * (1 + d_i)."""
        return self.theta_const * (1.0 + self.dev_points)

    def sample(self, times) -> np.ndarray:
        """Parameter vectors at the given times, [len(times), 5]."""
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        out = np.tile(self.theta_const, (len(times), 1))
        inside = times <= self.t_p
        if np.any(inside):
            dev = basis_matrix(self.knots, times[inside]) @ self.dev_points
            out[inside] = self.theta_const * (1.0 + dev)
        return out


def theta_sequence_tensor(basis: np.ndarray, dev_points: ad.Tensor, theta_const) -> ad.Tensor:
    """Differentiable dense parameter sequence from deviation control points.

    basis: [steps, num_points]; dev_points: [batch, num_points, 5].
    Returns theta_const * (1 + basis @ dev_points) of shape [batch, steps, 5].
    """
    dev = ad.matmul(ad.Tensor(basis), dev_points)
    return ad.mul(ad.add(dev, 1.0), ad.Tensor(np.asarray(theta_const)))


def rollout(x0, taus, theta_seq, dt: float, gravity: float = 9.81):
    """Batched RK4 rollout with per-step parameters; differentiable in theta_seq.

    x0: [batch, 2] initial (q, q_dot); taus: [batch, steps] zero-order-held
    torques; theta_seq: [batch, steps, 5] tensor or array (parameters frozen
    at each step's start). Returns (states tensor [batch, steps, 2],
    diverged [batch] with -1 for clean windows). Gradients of diverged
    windows are zero; callers mask their loss terms.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    theta_data = ad.as_array(theta_seq)
    states, diverged = _kernels.rollout_fwd(x0, taus, theta_data, dt, gravity, COULOMB_SMOOTHING)
    if isinstance(theta_seq, ad.Tensor) and theta_seq.tracked:
        def vjp(g):
            return _kernels.rollout_bwd(x0, taus, theta_data, dt, gravity,
                                        COULOMB_SMOOTHING, states, g, diverged)
        out = ad.custom_op("rollout", states, [(theta_seq, vjp)])
    else:
        out = ad.Tensor(states)
    return out, diverged


def rollout_residual(x0, taus, theta_seq, w1, b1, w2, b2, v_norm: float,
                     dt: float, gravity: float = 9.81):
    """Rollout of the nominal model plus an additive neural state-derivative
    correction (4 features -> tanh hidden -> 2 outputs); differentiable in
    theta_seq and in the network weights."""
    x0 = np.asarray(x0, dtype=np.float64)
    taus = np.asarray(taus, dtype=np.float64)
    tensors = (theta_seq, w1, b1, w2, b2)
    arrs = tuple(ad.as_array(t) for t in tensors)
    states, diverged = _kernels.rollout_res_fwd(x0, taus, *arrs, v_norm, dt,
                                                gravity, COULOMB_SMOOTHING)
    cache: dict = {}

    def make_vjp(idx):
        def vjp(g):
            if cache.get("key") != id(g):
                cache["key"] = id(g)
                cache["grads"] = _kernels.rollout_res_bwd(
                    x0, taus, *arrs, v_norm, dt, gravity, COULOMB_SMOOTHING,
                    states, g, diverged)
            return cache["grads"][idx]
        return vjp

    pairs = [(t, make_vjp(i)) for i, t in enumerate(tensors) if isinstance(t, ad.Tensor)]
    out = ad.custom_op("rollout_res", states, pairs) if pairs else ad.Tensor(states)
    return out, diverged


def rollout_single(x0, taus, trajectory: ParamTrajectory, dt: float, gravity: float = 9.81):
    """Single-trajectory rollout; raises RolloutDiverged on state escape."""
    taus = np.asarray(taus, dtype=np.float64)
    steps = len(taus)
    times = np.arange(steps) * dt
    theta_seq = trajectory.sample(times)[None]
    states, diverged = _kernels.rollout_fwd(np.asarray(x0, dtype=np.float64)[None],
                                            taus[None], theta_seq, dt, gravity,
                                            COULOMB_SMOOTHING)
    if diverged[0] >= 0:
        raise RolloutDiverged(int(diverged[0]))
    return states[0]
