"""Ground-truth simulator: a pendulum driven through a gear with backlash.

The backlash is realized as two bodies (motor rotor and link) coupled by a
stiff unilateral spring-damper that engages only outside the +-delta/2 dead
zone and can push but never pull. With delta == 0 the coupling is rigid and
the plant reduces exactly to the single-body gear-driven pendulum. The
motor-side state (q_m, q_m_dot) is hidden from every learned model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

OUTPUT_RATE_HZ = 100.0
DIVERGE_QD = 1000.0


@dataclass(frozen=True)
class SimSettings:
    """Plant constants; defaults follow the published pendulum setup."""

    step: float = 1e-5
    mass: float = 1.0
    length: float = 0.5
    damping: float = 0.05
    frictionloss: float = 0.0
    gear_ratio: float = 1.0
    backlash: float = math.radians(30.0)
    gravity: float = 9.81
    # two-body backlash realization constants (rigid coupling when backlash=0)
    motor_inertia: float = 1e-3
    motor_damping: float = 1e-3
    contact_stiffness: float = 20000.0
    contact_damping: float = 5.0

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError(f"integrator step must be positive, got {self.step}")
        if self.backlash < 0:
            raise ValueError(f"backlash must be non-negative, got {self.backlash}")
        if self.contact_stiffness <= 0:
            raise ValueError(f"contact stiffness must be positive, got {self.contact_stiffness}")

    def as_vector(self) -> np.ndarray:
        return np.array([
            self.mass, self.length, self.damping, self.frictionloss, self.gear_ratio,
            self.backlash, self.gravity, self.motor_inertia, self.motor_damping,
            self.contact_stiffness, self.contact_damping,
        ])


@dataclass(frozen=True)
class PlantState:
    q: float = 0.0
    q_dot: float = 0.0
    q_m: float = 0.0
    q_m_dot: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.q, self.q_dot, self.q_m, self.q_m_dot])


@dataclass
class EpisodeLog:
    """100 Hz recording of one episode.

    Row k holds the state at t = k*dt together with the torque that was
    applied over the interval ending at t (row 0 has tau = 0). Ground-truth
    motor-side columns and contact flags are carried separately so the
    observation stream (t, q, q_dot, tau) stays free of hidden state.
    """

    dt: float
    q: np.ndarray
    q_dot: np.ndarray
    tau: np.ndarray
    q_m: np.ndarray
    q_m_dot: np.ndarray
    contact: np.ndarray
    seed: int = 0
    failed: bool = False
    diverged_at: int = -1

    def __len__(self):
        return len(self.q)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.q)) * self.dt


def plant_derivative(state: PlantState, tau: float, settings: SimSettings):
    """Time derivative of the plant state (reference implementation)."""
    from ._kernels import pyref

    return pyref._plant_deriv(state.q, state.q_dot, state.q_m, state.q_m_dot,
                              float(tau), tuple(settings.as_vector()))


def step_plant(state: np.ndarray, taus: np.ndarray, settings: SimSettings,
               samples_per_tau: int = 1):
    """Advance the plant, one output sample per entry of `taus` (zero-order hold).

    Returns (states [n,4], contact [n], diverged_at). `samples_per_tau` > 1
    repeats each torque over that many output samples.
    """
    taus = np.repeat(np.asarray(taus, dtype=np.float64), samples_per_tau)
    substeps = int(round(1.0 / (OUTPUT_RATE_HZ * settings.step)))
    if abs(substeps * settings.step * OUTPUT_RATE_HZ - 1.0) > 1e-9:
        raise ValueError(f"integrator step {settings.step} does not divide the 100 Hz sample period")
    return _kernels.plant_sim(state, taus, substeps, settings.step, settings.as_vector())


def simulate(initial: PlantState, control_fn, duration: float,
             settings: SimSettings = SimSettings(), seed: int = 0) -> EpisodeLog:
    """Integrate for `duration` seconds, logging at 100 Hz.

    `control_fn(t)` is sampled at each 100 Hz tick and held constant over the
    following sample interval. `duration` must be a multiple of 0.01 s. An
    episode whose |q_dot| exceeds 1000 rad/s is marked failed (state frozen
    from the first bad sample).
    """
    dt = 1.0 / OUTPUT_RATE_HZ
    n = int(round(duration * OUTPUT_RATE_HZ))
    if abs(n * dt - duration) > 1e-9:
        raise ValueError(f"duration {duration} is not a multiple of {dt} s")
    taus = np.array([float(control_fn(k * dt)) for k in range(n - 1)])
    if settings.backlash == 0.0:
        initial = PlantState(q=initial.q, q_dot=initial.q_dot,
                             q_m=initial.q, q_m_dot=initial.q_dot)
    states, contact, diverged = step_plant(initial.as_vector(), taus, settings)
    q = np.concatenate([[initial.q], states[:, 0]])
    q_dot = np.concatenate([[initial.q_dot], states[:, 1]])
    q_m = np.concatenate([[initial.q_m], states[:, 2]])
    q_m_dot = np.concatenate([[initial.q_m_dot], states[:, 3]])
    tau = np.concatenate([[0.0], taus])
    c0 = 1 if (settings.backlash == 0.0
               or abs(initial.q_m - initial.q) >= settings.backlash / 2.0) else 0
    contact = np.concatenate([[c0], contact]).astype(np.uint8)
    return EpisodeLog(dt=dt, q=q, q_dot=q_dot, tau=tau, q_m=q_m, q_m_dot=q_m_dot,
                      contact=contact, seed=seed, failed=diverged >= 0,
                      diverged_at=-1 if diverged < 0 else diverged + 1)


def oracle_gear_ratio(contact: bool, settings: SimSettings) -> float:
    """Gear-ratio override for the oracle-adaptation baseline.

    The oracle reads the true contact flag and zeroes the gear ratio while
    the gear faces are disengaged; otherwise it returns the nominal ratio.
    """
    if contact is None:
        raise ValueError("oracle adaptation requires a ground-truth contact flag")
    return settings.gear_ratio if contact else 0.0


def mechanical_energy(q, q_dot, settings: SimSettings):
    """Link-side energy; conserved for the rigid frictionless unforced plant."""
    inertia = settings.mass * settings.length ** 2 / 3.0
    height = settings.mass * settings.gravity * (settings.length / 2.0)
    return 0.5 * inertia * np.square(q_dot) + height * (1.0 - np.cos(q))
