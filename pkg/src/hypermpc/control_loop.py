"""Receding-horizon control loop against the backlash plant.

Each control period: the model-specific driver turns the 100 Hz observation
history and the previously planned torque sequence into a per-node parameter
sequence; the trajectory optimizer solves the swing-up problem warm-started
from the shifted previous solution; the first torque-rate command is applied
and the plant advances one period (two 100 Hz samples). On a solver failure
the loop falls back to the shifted previous plan and counts the event.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .models import HDModel, HyperPMModel, history_features
from .ocp import MPCConfig, PendulumShooting, SwingUpCost, solve, wrap_pi
from .plant import OUTPUT_RATE_HZ, PlantState, SimSettings, oracle_gear_ratio, step_plant

OBS_DT = 1.0 / OUTPUT_RATE_HZ


@dataclass
class ClosedLoopResult:
    episode: int
    cost: float
    success: bool
    solver_failures: int
    steps: int
    diverged: bool = False
    log: dict = field(default_factory=dict)


class HistoryBuffer:
    """Rolling window of the last `size` observations at 100 Hz.

    Each row is (q, q_dot, tau) where tau is the torque that was applied over
    the interval ending at that sample; the initial state pads the buffer.
    """

    def __init__(self, size: int, initial: PlantState):
        self.size = size
        self.q = np.full(size, initial.q)
        self.qd = np.full(size, initial.q_dot)
        self.tau = np.zeros(size)

    def push(self, q: float, qd: float, tau: float):
        self.q = np.roll(self.q, -1)
        self.qd = np.roll(self.qd, -1)
        self.tau = np.roll(self.tau, -1)
        self.q[-1] = q
        self.qd[-1] = qd
        self.tau[-1] = tau


class ConstDriver:
    """Constant parameters over the horizon (const_s / const_l / res in MPC)."""

    def __init__(self, theta: np.ndarray, cfg: MPCConfig):
        self.theta_seq = np.tile(np.asarray(theta, dtype=np.float64), (cfg.horizon_steps, 1))

    def theta_for_step(self, history, planned_taus, contact):
        return self.theta_seq


class OracleDriver:
    """Ground-truth contact adaptation: gear ratio zeroed while disengaged.

    Even with perfect contact knowledge the parameters are propagated as
    constants over the horizon, which is exactly this baseline's limitation.
    """

    def __init__(self, theta: np.ndarray, settings: SimSettings, cfg: MPCConfig):
        self.theta = np.asarray(theta, dtype=np.float64)
        self.settings = settings
        self.n = cfg.horizon_steps

    def theta_for_step(self, history, planned_taus, contact):
        theta = self.theta.copy()
        theta[4] = oracle_gear_ratio(contact, self.settings)
        return np.tile(theta, (self.n, 1))


class HDDriver:
    """Static hypernetwork: one parameter vector inferred per control step."""

    def __init__(self, model: HDModel, cfg: MPCConfig):
        self.model = model
        self.node_times = np.arange(cfg.horizon_steps) * cfg.control_dt

    def theta_for_step(self, history, planned_taus, contact):
        feats = history_features(history.q, history.qd, history.tau, self.model.cfg.v_norm)
        traj = self.model.predict_trajectory(feats)
        return traj.sample(self.node_times)


class HyperPMDriver:
    """Trajectory hypernetwork conditioned on the previously planned torques."""

    def __init__(self, model: HyperPMModel, cfg: MPCConfig):
        self.model = model
        self.control_dt = cfg.control_dt
        self.node_times = np.arange(cfg.horizon_steps) * cfg.control_dt

    def theta_for_step(self, history, planned_taus, contact):
        feats = history_features(history.q, history.qd, history.tau, self.model.cfg.v_norm)
        traj = self.model.predict_trajectory(feats, planned_taus, self.control_dt)
        return traj.sample(self.node_times)


def make_driver(kind: str, model, settings: SimSettings, cfg: MPCConfig):
    if kind == "oracle":
        return OracleDriver(model.theta_values(), settings, cfg)
    if kind in ("const_s", "const_l"):
        return ConstDriver(model.theta_values(), cfg)
    if kind in ("hd_s", "hd_l"):
        return HDDriver(model, cfg)
    if kind == "hyperpm":
        return HyperPMDriver(model, cfg)
    raise ValueError(f"model kind '{kind}' cannot drive the control loop "
                     "(supported: const_s, const_l, hd_s, hd_l, hyperpm, oracle)")


def _pump_primers(theta0: np.ndarray, cfg: MPCConfig) -> list:
    """Bang-bang torque-rate schedules near the pendulum's natural frequency.

    The wrapped quadratic cost has a shallow local optimum at the hanging
    equilibrium; a couple of resonant warm starts let the solver discover
    pumping trajectories it would never reach from the shifted previous plan.
    """
    t = np.arange(cfg.horizon_steps) * cfg.control_dt
    omega = np.sqrt(3.0 * 9.81 / (2.0 * max(theta0[1], 1e-6)))
    return [cfg.rate_bound * np.sign(np.sin(omega * t + phase))
            for phase in (0.0, np.pi)]


def run_episode(driver, settings: SimSettings, cfg: MPCConfig, initial: PlantState,
                episode: int = 0) -> ClosedLoopResult:
    cost_fn = SwingUpCost(cfg)
    n = cfg.horizon_steps
    samples_per_period = int(round(cfg.control_dt * OUTPUT_RATE_HZ))
    steps = int(round(cfg.duration / cfg.control_dt))
    history = HistoryBuffer(50, initial)
    planned_taus = np.zeros(n)
    warm_us = np.zeros(n)
    plant_state = initial.as_vector()
    tau = 0.0
    failures = 0
    diverged = False
    log = {k: np.zeros(steps) for k in
           ("t", "q", "q_dot", "tau", "u", "stage_cost", "solve_ms", "solver_ok")}
    obs_q = [initial.q]
    obs_qd = [initial.q_dot]
    total_cost = 0.0
    for k in range(steps):
        x_aug = np.array([plant_state[0], plant_state[1], tau])
        contact = bool(settings.backlash == 0.0
                       or abs(plant_state[2] - plant_state[0]) >= settings.backlash / 2.0)
        t0 = time.perf_counter()
        theta_seq = driver.theta_for_step(history, planned_taus, contact)
        shooting = PendulumShooting(theta_seq, cfg.control_dt, settings.gravity, cfg.rate_bound)
        sol = solve(shooting, cost_fn, x_aug, warm_us,
                    max_iterations=cfg.max_iterations, tol=cfg.tol)
        best = sol if sol.converged else None
        if best is None or best.cost > cfg.primer_cost_threshold:
            for primer in _pump_primers(theta_seq[0], cfg):
                cand = solve(shooting, cost_fn, x_aug, primer,
                             max_iterations=cfg.max_iterations, tol=cfg.tol)
                if cand.converged and (best is None or cand.cost < best.cost):
                    best = cand
        solve_ms = (time.perf_counter() - t0) * 1e3
        sol = best if best is not None else sol
        if best is not None:
            u0 = float(sol.controls[0])
            warm_us = np.concatenate([sol.controls[1:], sol.controls[-1:]])
            planned_taus = np.concatenate([sol.states[2:, 2], sol.states[-1:, 2]])
        else:
            failures += 1
            u0 = float(warm_us[0])
            warm_us = np.concatenate([warm_us[1:], warm_us[-1:]])
            planned_taus = np.concatenate([planned_taus[1:], planned_taus[-1:]])
        stage = float(cost_fn.stage(x_aug[None], np.array([u0]))[0])
        total_cost += stage
        tau = float(np.clip(tau + cfg.control_dt * u0, -cfg.tau_bound, cfg.tau_bound))
        states, _, div = step_plant(plant_state, [tau], settings,
                                    samples_per_tau=samples_per_period)
        for row in states:
            obs_q.append(row[0])
            obs_qd.append(row[1])
            history.push(row[0], row[1], tau)
        plant_state = states[-1]
        log["t"][k] = k * cfg.control_dt
        log["q"][k] = plant_state[0]
        log["q_dot"][k] = plant_state[1]
        log["tau"][k] = tau
        log["u"][k] = u0
        log["stage_cost"][k] = stage
        log["solve_ms"][k] = solve_ms
        log["solver_ok"][k] = float(sol.converged)
        if div >= 0:
            diverged = True
            break
    success = _upright_success(np.array(obs_q), np.array(obs_qd), cfg) and not diverged
    return ClosedLoopResult(episode=episode, cost=total_cost, success=success,
                            solver_failures=failures, steps=steps, diverged=diverged, log=log)


def _upright_success(q: np.ndarray, qd: np.ndarray, cfg: MPCConfig) -> bool:
    """Stabilized upright: angle and velocity inside bounds over the final window."""
    window = int(round(cfg.success_window * OUTPUT_RATE_HZ))
    if len(q) < window:
        return False
    tail_q = q[-window:]
    tail_qd = qd[-window:]
    return bool(np.all(np.abs(wrap_pi(tail_q - np.pi)) < cfg.success_angle)
                and np.all(np.abs(tail_qd) < cfg.success_vel))


def run_closed_loop(kind: str, model, settings: SimSettings, cfg: MPCConfig,
                    log_fn=None) -> list:
    """Seeded batch of episodes with initial conditions in the published range."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x319)))
    driver = make_driver(kind, model, settings, cfg)
    results = []
    for episode in range(cfg.episodes):
        q0 = rng.uniform(-np.pi / 2, np.pi / 2)
        qd0 = rng.uniform(-0.5, 0.5)
        initial = PlantState(q=q0, q_dot=qd0, q_m=q0, q_m_dot=qd0)
        result = run_episode(driver, settings, cfg, initial, episode)
        results.append(result)
        if log_fn is not None:
            log_fn(f"[{kind}] episode {episode}: cost {result.cost:.2f} "
                   f"success {result.success} failures {result.solver_failures}")
    return results


def summarize(kind: str, results: list) -> dict:
    costs = np.array([r.cost for r in results])
    return {
        "model": kind,
        "cost_mean": float(costs.mean()),
        "cost_std": float(costs.std()),
        "success_rate": 100.0 * sum(r.success for r in results) / len(results),
        "solver_failure_rate": 100.0 * sum(r.solver_failures > 0 for r in results) / len(results),
        "episodes": len(results),
    }
