"""Sliding-window samples, training objectives, the training loop, evaluation.

The long-sequence objective rolls the model out for the full horizon from
each window's initial state and penalizes the mean squared error over wrapped
angle and max-normalized velocity, plus an L1 penalty on the tanh-squashed
parameter deviations for the trajectory-valued hypernetwork. The single-step
objective takes one integration step from every ground-truth state instead;
it trains the `_s` baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .bsplines import basis_matrix
from .dataset import load_split, manifest_hash
from .dynamics import rollout, rollout_residual, theta_sequence_tensor
from .models import (ConstModel, HDModel, HyperPMModel, ModelBase, ModelConfig,
                     ResidualModel, build_model, default_config, history_features,
                     inject_control_noise)
from .optim import AdamW, clip_by_value

LONG_KINDS = ("const_l", "hd_l", "res", "hyperpm")
SHORT_KINDS = ("const_s", "hd_s")


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 128
    learning_rate: float = 5e-4
    grad_clip: float = 5e-4
    horizon_steps: int = 250
    history_len: int = 50
    stride: int = 5
    seed: int = 0
    weight_decay: float = 0.0
    theta_const_epochs: int = 120
    sigma_robust: float = 0.2
    n_reg: float = 0.05

    def __post_init__(self):
        for name in ("epochs", "batch_size", "learning_rate", "grad_clip",
                     "horizon_steps", "history_len", "stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.sigma_robust < 0 or self.n_reg < 0:
            raise ValueError("sigma_robust and n_reg must be non-negative")

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class Batch:
    hist_q: np.ndarray
    hist_qd: np.ndarray
    hist_tau: np.ndarray
    x0: np.ndarray
    fut_tau: np.ndarray
    fut_q: np.ndarray
    fut_qd: np.ndarray

    def __len__(self):
        return len(self.x0)

    @property
    def targets(self) -> np.ndarray:
        return np.stack([self.fut_q, self.fut_qd], axis=-1)


class WindowSet:
    """Index of sliding windows over a list of episode logs.

    A window spans history_len + horizon consecutive samples: the first
    history_len rows are the observation window (its last row is the rollout
    initial state), the remaining rows carry the future torques and target
    states.
    """

    def __init__(self, episodes, history_len: int, horizon: int, stride: int, log_fn=None):
        self.episodes = list(episodes)
        self.history_len = history_len
        self.horizon = horizon
        self.index = []
        span = history_len + horizon
        for ep_idx, ep in enumerate(self.episodes):
            if len(ep) < span:
                if log_fn is not None:
                    log_fn(f"episode {ep_idx}: {len(ep)} samples < window span {span}, skipped")
                continue
            for start in range(0, len(ep) - span + 1, stride):
                self.index.append((ep_idx, start))

    def __len__(self):
        return len(self.index)

    def gather(self, idxs) -> Batch:
        h, t = self.history_len, self.horizon
        rows = [self.index[i] for i in idxs]
        hist_q = np.empty((len(rows), h))
        hist_qd = np.empty((len(rows), h))
        hist_tau = np.empty((len(rows), h))
        fut_tau = np.empty((len(rows), t))
        fut_q = np.empty((len(rows), t))
        fut_qd = np.empty((len(rows), t))
        for i, (ep_idx, start) in enumerate(rows):
            ep = self.episodes[ep_idx]
            hist_q[i] = ep.q[start:start + h]
            hist_qd[i] = ep.q_dot[start:start + h]
            hist_tau[i] = ep.tau[start:start + h]
            fut_tau[i] = ep.tau[start + h:start + h + t]
            fut_q[i] = ep.q[start + h:start + h + t]
            fut_qd[i] = ep.q_dot[start + h:start + h + t]
        x0 = np.stack([hist_q[:, -1], hist_qd[:, -1]], axis=1)
        return Batch(hist_q, hist_qd, hist_tau, x0, fut_tau, fut_q, fut_qd)


def build_windows(manifest: dict, split: str, cfg: TrainConfig, log_fn=None) -> WindowSet:
    episodes = load_split(manifest, split)
    return WindowSet(episodes, cfg.history_len, cfg.horizon_steps, cfg.stride, log_fn)


def velocity_normalizer(manifest: dict) -> float:
    """Max |q_dot| over the training split (floor 1e-6 to keep division safe)."""
    peak = 0.0
    for ep in load_split(manifest, "train"):
        peak = max(peak, float(np.abs(ep.q_dot).max()))
    return max(peak, 1e-6)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def _prediction_error(states: ad.Tensor, targets: np.ndarray, v_norm: float) -> ad.Tensor:
    """Per-window mean over steps and channels of wrapped/normalized squared error."""
    diff = ad.sub(states, ad.Tensor(targets))
    dq = ad.wrap_angle(ad.narrow(diff, 2, 0, 1))
    dv = ad.mul(ad.narrow(diff, 2, 1, 1), 1.0 / v_norm)
    err = ad.concat([ad.square(dq), ad.square(dv)], axis=2)
    return ad.reduce_mean(err, axis=(1, 2))


def _masked_mean(per_window: ad.Tensor, diverged: np.ndarray):
    mask = (diverged < 0).astype(np.float64)
    valid = int(mask.sum())
    total = ad.reduce_sum(ad.mul(per_window, mask))
    mean = ad.mul(total, 1.0 / max(valid, 1))
    return mean, len(mask) - valid


def _theta_seq_for(model: ModelBase, watched: dict, batch: Batch, steps: int,
                   basis: np.ndarray | None, training: bool, rng) -> tuple:
    """Dense per-step parameter tensor [b, steps, 5] and the regularizer."""
    b = len(batch)
    if isinstance(model, HyperPMModel):
        cps = model.fit_control_points(batch.fut_tau, 0.01)
        if training and model.cfg.sigma_robust > 0.0:
            cps = inject_control_noise(cps, model.cfg.sigma_robust, rng)
        feats = history_features(batch.hist_q, batch.hist_qd, batch.hist_tau, model.cfg.v_norm)
        squash = model.forward(watched, ad.Tensor(feats), cps)
        dev_points = ad.mul(squash, model.cfg.delta_max)
        theta = theta_sequence_tensor(basis, dev_points, model.theta_const)
        reg = ad.mul(ad.reduce_mean(ad.absolute(squash)), model.cfg.n_reg)
        return theta, reg
    if isinstance(model, HDModel):
        feats = history_features(batch.hist_q, batch.hist_qd, batch.hist_tau, model.cfg.v_norm)
        dev = model.forward(watched, ad.Tensor(feats))
        dev = ad.broadcast_to(ad.reshape(dev, (b, 1, 5)), (b, steps, 5))
        theta = ad.mul(ad.add(dev, 1.0), ad.Tensor(model.theta_const))
        return theta, None
    if isinstance(model, ConstModel):  # includes ResidualModel
        theta = ad.exp(watched["log_theta"])
        theta = ad.broadcast_to(ad.reshape(theta, (1, 1, 5)), (b, steps, 5))
        return theta, None
    raise TypeError(f"unsupported model type {type(model).__name__}")


def multi_step_loss(model: ModelBase, watched: dict, batch: Batch,
                    basis: np.ndarray | None = None, training: bool = False,
                    rng=None) -> tuple:
    """Full-horizon rollout objective; returns (loss tensor, info dict)."""
    steps = batch.fut_tau.shape[1]
    if steps == 0:
        return ad.Tensor(0.0), {"pred_error": 0.0, "skipped": 0, "per_window": np.zeros(len(batch))}
    theta, reg = _theta_seq_for(model, watched, batch, steps, basis, training, rng)
    if isinstance(model, ResidualModel):
        states, diverged = rollout_residual(
            batch.x0, batch.fut_tau, theta, watched["res_w1"], watched["res_b1"],
            watched["res_w2"], watched["res_b2"], model.cfg.v_norm, 0.01, model.cfg.gravity)
    else:
        states, diverged = rollout(batch.x0, batch.fut_tau, theta, 0.01, model.cfg.gravity)
    per_window = _prediction_error(states, batch.targets, model.cfg.v_norm)
    pred, skipped = _masked_mean(per_window, diverged)
    loss = ad.add(pred, reg) if reg is not None else pred
    info = {"pred_error": float(pred.data), "skipped": skipped,
            "per_window": per_window.data, "diverged": diverged}
    return loss, info


def single_step_loss(model: ModelBase, watched: dict, batch: Batch,
                     training: bool = False, rng=None) -> tuple:
    """One integration step from every ground-truth state in the horizon."""
    b = len(batch)
    steps = batch.fut_tau.shape[1]
    if steps == 0:
        return ad.Tensor(0.0), {"pred_error": 0.0, "skipped": 0, "per_window": np.zeros(b)}
    starts_q = np.concatenate([batch.x0[:, :1], batch.fut_q[:, :-1]], axis=1)
    starts_qd = np.concatenate([batch.x0[:, 1:], batch.fut_qd[:, :-1]], axis=1)
    x0 = np.stack([starts_q.ravel(), starts_qd.ravel()], axis=1)
    taus = batch.fut_tau.reshape(-1, 1)
    theta, _ = _theta_seq_for(model, watched, batch, steps, None, training, rng)
    theta = ad.reshape(theta, (b * steps, 1, 5))
    if isinstance(model, ResidualModel):
        states, diverged = rollout_residual(
            x0, taus, theta, watched["res_w1"], watched["res_b1"],
            watched["res_w2"], watched["res_b2"], model.cfg.v_norm, 0.01, model.cfg.gravity)
    else:
        states, diverged = rollout(x0, taus, theta, 0.01, model.cfg.gravity)
    states = ad.reshape(states, (b, steps, 2))
    per_window = _prediction_error(states, batch.targets, model.cfg.v_norm)
    window_diverged = np.where(diverged.reshape(b, steps).max(axis=1) >= 0, 0, -1).astype(np.int64)
    pred, skipped = _masked_mean(per_window, window_diverged)
    info = {"pred_error": float(pred.data), "skipped": skipped,
            "per_window": per_window.data, "diverged": window_diverged}
    return pred, info


def objective_for(kind: str):
    return multi_step_loss if kind in LONG_KINDS else single_step_loss


def _loss_for_batch(model, batch, basis, kind, training, rng):
    tape = ad.Tape()
    with tape:
        watched = model.watch_all(tape)
        if kind in LONG_KINDS:
            loss, info = multi_step_loss(model, watched, batch, basis, training, rng)
        else:
            loss, info = single_step_loss(model, watched, batch, training, rng)
    return tape, watched, loss, info


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _param_basis(model, cfg: TrainConfig):
    if isinstance(model, HyperPMModel):
        times = np.arange(cfg.horizon_steps) * 0.01
        return basis_matrix(model.control_knots, times)
    return None


def train(model: ModelBase, manifest: dict, cfg: TrainConfig, log_fn=print) -> dict:
    """Train in place; returns {'metrics': rows, 'best_epoch', 'best_val_loss'}.

    Gradient clipping by value applies to long-sequence kinds only; the
    robustness noise on planned-control points applies to the trajectory
    hypernetwork only and never during validation. The best-validation
    parameters are restored into the model at the end.
    """
    kind = model.kind
    train_ws = build_windows(manifest, "train", cfg, log_fn)
    val_ws = build_windows(manifest, "val", cfg, log_fn)
    if len(train_ws) == 0:
        raise ValueError("training split produced no windows")
    seq = np.random.SeedSequence(cfg.seed)
    shuffle_rng, noise_rng = (np.random.default_rng(s) for s in seq.spawn(2))
    opt = AdamW(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    basis = _param_basis(model, cfg)
    clip = kind in LONG_KINDS
    metrics = []
    best = {"val_loss": np.inf, "epoch": 0, "params": model.copy_params()}
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_ws))
        train_losses = []
        skipped = 0
        finite_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = train_ws.gather(order[lo:lo + cfg.batch_size])
            tape, watched, loss, info = _loss_for_batch(
                model, batch, basis, kind, True, noise_rng)
            skipped += info["skipped"]
            if not np.isfinite(loss.data):
                continue
            finite_batches += 1
            names = list(watched)
            grads = dict(zip(names, tape.gradients(loss, [watched[n] for n in names])))
            model.apply_masks(grads)
            if clip:
                grads = clip_by_value(grads, cfg.grad_clip)
            opt.step(grads)
            model.enforce_masks()
            train_losses.append(float(loss.data))
        if finite_batches == 0:
            raise ArithmeticError(
                f"epoch {epoch}: every batch produced a non-finite loss; aborting")
        val_loss, val_pred = _validate(model, val_ws, basis, kind, cfg)
        metrics.append({
            "epoch": epoch,
            "train_loss": float(np.mean(train_losses)),
            "val_loss": val_loss,
            "val_pred_error": val_pred,
            "lr": cfg.learning_rate,
            "skipped": skipped,
        })
        if val_loss < best["val_loss"]:
            best = {"val_loss": val_loss, "epoch": epoch, "params": model.copy_params()}
        if log_fn is not None and (epoch % 50 == 0 or epoch == 1 or epoch == cfg.epochs):
            log_fn(f"[{kind}] epoch {epoch}/{cfg.epochs} train {metrics[-1]['train_loss']:.6f} "
                   f"val {val_loss:.6f} pred {val_pred:.6f}")
    model.load_params(best["params"])
    return {"metrics": metrics, "best_epoch": best["epoch"], "best_val_loss": best["val_loss"]}


def _validate(model, val_ws: WindowSet, basis, kind: str, cfg: TrainConfig):
    """Objective loss and 250-step prediction error on the validation split."""
    if len(val_ws) == 0:
        return np.nan, np.nan
    losses, preds, counts = [], [], []
    for lo in range(0, len(val_ws), cfg.batch_size):
        idxs = np.arange(lo, min(lo + cfg.batch_size, len(val_ws)))
        batch = val_ws.gather(idxs)
        _, _, loss, info = _loss_for_batch(model, batch, basis, kind, False, None)
        losses.append(float(loss.data) * len(batch))
        counts.append(len(batch))
        if kind in LONG_KINDS:
            preds.append(float(np.mean(info["per_window"])) * len(batch))
        else:
            tape = ad.Tape()
            with tape:
                watched = model.watch_all(tape)
                _, minfo = multi_step_loss(model, watched, batch, basis, False, None)
            preds.append(float(np.mean(minfo["per_window"])) * len(batch))
    n = sum(counts)
    return sum(losses) / n, sum(preds) / n


def fit_theta_const(manifest: dict, cfg: TrainConfig, kind: str, log_fn=None) -> np.ndarray:
    """Nominal parameter vector: a constant model fitted with the objective
    matching `kind` (single-step for hd_s, long-sequence otherwise)."""
    const_kind = "const_s" if kind in SHORT_KINDS else "const_l"
    model_cfg = default_config(const_kind, v_norm=velocity_normalizer(manifest))
    model = build_model(model_cfg, seed=cfg.seed)
    train(model, manifest, cfg.replace(epochs=cfg.theta_const_epochs), log_fn=log_fn)
    return model.theta_values()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_prediction(model: ModelBase, manifest: dict, cfg: TrainConfig,
                        split: str = "test") -> dict:
    """Long-horizon prediction error over a split (regularization excluded).

    Diverged rollouts are included with the error of their frozen tail; a
    model that cannot stay finite earns its blow-up in the mean.
    """
    ws = build_windows(manifest, split, cfg)
    if len(ws) == 0:
        raise ValueError(f"split '{split}' has no episodes long enough for evaluation")
    basis = _param_basis(model, cfg)
    errors = []
    diverged_total = 0
    for lo in range(0, len(ws), cfg.batch_size):
        idxs = np.arange(lo, min(lo + cfg.batch_size, len(ws)))
        batch = ws.gather(idxs)
        tape = ad.Tape()
        with tape:
            watched = model.watch_all(tape)
            _, info = multi_step_loss(model, watched, batch, basis, False, None)
        errors.append(info["per_window"])
        diverged_total += int((info["diverged"] >= 0).sum())
    errors = np.concatenate(errors)
    return {
        "model": model.kind,
        "split": split,
        "mean_error": float(errors.mean()),
        "std_error": float(errors.std()),
        "windows": len(errors),
        "diverged_windows": diverged_total,
        "manifest_hash": manifest_hash(manifest),
    }


def improvement_pct(baseline_error: float, model_error: float) -> float:
    """Relative improvement over a baseline, in percent."""
    return 100.0 * (1.0 - model_error / baseline_error)
