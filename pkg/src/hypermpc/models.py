"""Learned predictors over the nominal pendulum model.

Five model kinds share the nominal dynamics structure and differ in how the
parameter vector is produced:

- const   : one trainable parameter vector (log-space, positivity for free).
- hd      : a GRU history encoder plus an MLP infers one bounded parameter
            vector per window, held constant over the horizon.
- hyperpm : a GRU history encoder plus a causally masked MLP maps the latent
            history state and the spline-compressed planned controls to a
            full trajectory of bounded parameter deviations.
- res     : trainable constant parameters plus an additive neural
            state-derivative correction inside the rollout.

The hypernetwork trajectory head works in B-spline control-point space: the
planned-control sequence is least-squares fitted to control points (so the
deployment sample rate can differ from the training rate), and the predicted
deviation control points are squashed with tanh and scaled by delta_max so
the interpolated parameters stay inside theta_const * (1 +- delta_max).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .bsplines import KnotVector, fit_matrix
from .dynamics import ParamTrajectory

MODEL_KINDS = ("const_s", "const_l", "hd_s", "hd_l", "res", "hyperpm")

# nominal initialization for trainable constant parameters: the physical
# datasheet values with a tiny Coulomb term (log-space cannot start at zero)
THETA_INIT = np.array([1.0, 0.5, 0.05, 1e-3, 1.0])


def history_features(q, q_dot, tau, v_norm: float) -> np.ndarray:
    """Encoder features per history sample: (sin q, cos q, q_dot/v_norm, tau)."""
    return np.stack([np.sin(q), np.cos(q), np.asarray(q_dot) / v_norm,
                     np.asarray(tau, dtype=np.float64)], axis=-1)


@dataclass
class ModelConfig:
    kind: str = "hyperpm"
    gravity: float = 9.81
    v_norm: float = 8.0
    t_p: float = 2.5
    history_len: int = 50
    # hypernetwork trajectory head
    control_points: int = 25
    gru_hidden: int = 4
    latent: int = 8
    features_per_cp: int = 8
    delta_max: float = 1.0
    sigma_robust: float = 0.2
    n_reg: float = 0.05
    eac: bool = False
    # static-hypernetwork / residual heads
    mlp_hidden: int = 128
    res_hidden: int = 16

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def default_config(kind: str, **overrides) -> ModelConfig:
    """Published per-kind hyperparameters for the pendulum task."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind '{kind}'; valid kinds: {', '.join(MODEL_KINDS)}")
    base = ModelConfig(kind=kind)
    if kind == "hd_l":
        base = base.replace(gru_hidden=32, mlp_hidden=128)
    elif kind == "hd_s":
        base = base.replace(gru_hidden=4, mlp_hidden=512)
    return base.replace(**overrides) if overrides else base


class ModelBase:
    """Shared container: named parameter arrays plus optional gradient masks."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}

    @property
    def kind(self) -> str:
        return self.cfg.kind

    def watch_all(self, tape: ad.Tape) -> dict:
        return {name: tape.watch(arr) for name, arr in self.params.items()}

    def apply_masks(self, arrays: dict) -> dict:
        for name, mask in self.masks.items():
            if name in arrays:
                arrays[name] = arrays[name] * mask
        return arrays

    def enforce_masks(self) -> None:
        for name, mask in self.masks.items():
            self.params[name] *= mask

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict) -> None:
        for k, v in self.params.items():
            v[:] = params[k]


class ConstModel(ModelBase):
    """Trainable constant parameter vector, stored in log space."""

    def __init__(self, cfg: ModelConfig, theta_init=THETA_INIT):
        super().__init__(cfg)
        self.params = {"log_theta": np.log(np.asarray(theta_init, dtype=np.float64))}

    def theta_values(self) -> np.ndarray:
        return np.exp(self.params["log_theta"])

    def theta_tensor(self, watched: dict) -> ad.Tensor:
        return ad.exp(watched["log_theta"])

    def trajectory(self) -> ParamTrajectory:
        return ParamTrajectory.constant(self.theta_values(), t_p=self.cfg.t_p)


class ResidualModel(ConstModel):
    """Constant parameters plus an additive neural derivative correction."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, theta_init=THETA_INIT):
        super().__init__(cfg, theta_init)
        hid = cfg.res_hidden
        self.params.update({
            "res_w1": nn.uniform_init(rng, (4, hid), 4),
            "res_b1": nn.uniform_init(rng, (hid,), 4),
            "res_w2": nn.uniform_init(rng, (hid, 2), hid),
            "res_b2": nn.uniform_init(rng, (2,), hid),
        })


class _EncoderMixin:
    """GRU history encoder shared by the hypernetwork models."""

    def _init_encoder(self, rng: np.random.Generator, hidden: int):
        self.params.update({
            "gru_wx": nn.uniform_init(rng, (4, 3 * hidden), hidden),
            "gru_wh": nn.uniform_init(rng, (hidden, 3 * hidden), hidden),
            "gru_b": nn.uniform_init(rng, (3 * hidden,), hidden),
        })

    def encode(self, watched: dict, feats: ad.Tensor) -> ad.Tensor:
        if feats.shape[1] != self.cfg.history_len:
            raise ValueError(f"history window has {feats.shape[1]} samples, "
                             f"expected {self.cfg.history_len}")
        hidden = self.params["gru_wh"].shape[0]
        h0 = ad.Tensor(np.zeros((feats.shape[0], hidden)))
        return nn.gru_sequence(feats, h0, watched["gru_wx"], watched["gru_wh"],
                               watched["gru_b"])


class HDModel(ModelBase, _EncoderMixin):
    """Static hypernetwork: history -> one bounded parameter vector."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, theta_const):
        super().__init__(cfg)
        self.theta_const = np.asarray(theta_const, dtype=np.float64)
        self._init_encoder(rng, cfg.gru_hidden)
        self.params.update({
            "mlp_w1": nn.uniform_init(rng, (cfg.gru_hidden, cfg.mlp_hidden), cfg.gru_hidden),
            "mlp_b1": nn.uniform_init(rng, (cfg.mlp_hidden,), cfg.gru_hidden),
            "mlp_w2": nn.uniform_init(rng, (cfg.mlp_hidden, 5), cfg.mlp_hidden),
            "mlp_b2": nn.uniform_init(rng, (5,), cfg.mlp_hidden),
        })

    def forward(self, watched: dict, feats: ad.Tensor) -> ad.Tensor:
        """Bounded deviation vector [batch, 5]; planned controls play no role."""
        h = self.encode(watched, feats)
        hidden = ad.relu(nn.linear(h, watched["mlp_w1"], watched["mlp_b1"]))
        raw = nn.linear(hidden, watched["mlp_w2"], watched["mlp_b2"])
        return ad.mul(ad.tanh(raw), self.cfg.delta_max)

    def predict_trajectory(self, history_feats: np.ndarray) -> ParamTrajectory:
        tape = ad.Tape()
        with tape:
            watched = self.watch_all(tape)
            dev = self.forward(watched, ad.Tensor(history_feats[None]))
        points = np.tile(dev.data[0], (self.cfg.control_points, 1))
        return ParamTrajectory(self.theta_const, points, self.cfg.t_p, self.cfg.delta_max)


class HyperPMModel(ModelBase, _EncoderMixin):
    """Trajectory-valued hypernetwork with a causally masked control head."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, theta_const):
        super().__init__(cfg)
        self.theta_const = np.asarray(theta_const, dtype=np.float64)
        p, f, lat = cfg.control_points, cfg.features_per_cp, cfg.latent
        self._init_encoder(rng, cfg.gru_hidden)
        width = p * f
        self.params.update({
            "up_w": nn.uniform_init(rng, (cfg.gru_hidden, lat), cfg.gru_hidden),
            "up_b": nn.uniform_init(rng, (lat,), cfg.gru_hidden),
            "mlp_w1": nn.uniform_init(rng, (lat + p, width), lat + p),
            "mlp_b1": nn.uniform_init(rng, (width,), lat + p),
            "mlp_w2": nn.uniform_init(rng, (width, p * 5), width),
            "mlp_b2": nn.uniform_init(rng, (p * 5,), width),
        })
        self.masks = {"mlp_w1": self._mask_w1(), "mlp_w2": self._mask_w2()}
        self.enforce_masks()
        self.control_knots = KnotVector.clamped_uniform(3, p, 0.0, cfg.t_p)
        self._fit_cache: dict = {}

    def _mask_w1(self) -> np.ndarray:
        """Input row for control point j may feed hidden block i only if j <= i."""
        cfg = self.cfg
        p, f, lat = cfg.control_points, cfg.features_per_cp, cfg.latent
        mask = np.ones((lat + p, p * f))
        for j in range(p):
            for i in range(p):
                if j > i:
                    mask[lat + j, i * f:(i + 1) * f] = 0.0
        return mask

    def _mask_w2(self) -> np.ndarray:
        """Hidden block b may feed output control point i only if b <= i."""
        cfg = self.cfg
        p, f = cfg.control_points, cfg.features_per_cp
        mask = np.ones((p * f, p * 5))
        for bblk in range(p):
            for i in range(p):
                if bblk > i:
                    mask[bblk * f:(bblk + 1) * f, i * 5:(i + 1) * 5] = 0.0
        return mask

    def control_fit_matrix(self, sample_times) -> np.ndarray:
        """Cached least-squares map from planned-control samples to control points."""
        key = (len(sample_times), float(sample_times[0]), float(sample_times[-1]))
        if key not in self._fit_cache:
            self._fit_cache[key] = fit_matrix(self.control_knots, sample_times)
        return self._fit_cache[key]

    def fit_control_points(self, planned_taus: np.ndarray, dt: float) -> np.ndarray:
        """Fit planned torque sequences [batch, n] to control points [batch, p].

        The sequence is zero-order-held, so n samples at rate 1/dt span n*dt
        seconds; they must cover the full prediction horizon t_p.
        """
        n = planned_taus.shape[-1]
        if n * dt < self.cfg.t_p - 1e-9:
            raise ValueError(f"planned controls span {n * dt:.3f} s "
                             f"< prediction horizon {self.cfg.t_p} s")
        times = np.arange(n) * dt
        fit = self.control_fit_matrix(times)
        return planned_taus @ fit.T

    def forward(self, watched: dict, feats: ad.Tensor, control_points: np.ndarray) -> ad.Tensor:
        """tanh-squashed deviation control points [batch, p, 5] in (-1, 1).

        With `eac` set, the planned-control input is zeroed (ablation that
        removes conditioning on expected actions).
        """
        cfg = self.cfg
        cps = np.zeros_like(control_points) if cfg.eac else control_points
        h = self.encode(watched, feats)
        h_tc = nn.linear(h, watched["up_w"], watched["up_b"])
        x = ad.concat([h_tc, ad.Tensor(cps)], axis=1)
        hidden = ad.tanh(nn.linear(x, watched["mlp_w1"], watched["mlp_b1"]))
        raw = nn.linear(hidden, watched["mlp_w2"], watched["mlp_b2"])
        return ad.tanh(ad.reshape(raw, (raw.shape[0], cfg.control_points, 5)))

    def predict_trajectory(self, history_feats: np.ndarray, planned_taus: np.ndarray,
                           planned_dt: float) -> ParamTrajectory:
        cps = self.fit_control_points(planned_taus[None], planned_dt)
        tape = ad.Tape()
        with tape:
            watched = self.watch_all(tape)
            squash = self.forward(watched, ad.Tensor(history_feats[None]), cps)
        points = self.cfg.delta_max * squash.data[0]
        return ParamTrajectory(self.theta_const, points, self.cfg.t_p, self.cfg.delta_max)


def inject_control_noise(control_points: np.ndarray, sigma_robust: float,
                         rng: np.random.Generator) -> np.ndarray:
    """Training-time robustness noise: multiply each control point by N(1, sigma)."""
    if sigma_robust == 0.0:
        return control_points
    return control_points * rng.normal(1.0, sigma_robust, size=control_points.shape)


def build_model(cfg: ModelConfig, seed: int = 0, theta_const=None) -> ModelBase:
    """Construct a model of cfg.kind with seeded initialization."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0DE)))
    kind = cfg.kind
    if kind in ("const_s", "const_l"):
        return ConstModel(cfg)
    if kind == "res":
        return ResidualModel(cfg, rng)
    if theta_const is None:
        raise ValueError(f"model kind '{kind}' needs a nominal parameter vector theta_const")
    if kind in ("hd_s", "hd_l"):
        return HDModel(cfg, rng, theta_const)
    if kind == "hyperpm":
        return HyperPMModel(cfg, rng, theta_const)
    raise ValueError(f"unknown model kind '{kind}'; valid kinds: {', '.join(MODEL_KINDS)}")
