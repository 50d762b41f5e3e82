import numpy as np
import pytest

from hypermpc import autodiff as ad
from hypermpc.dataset import load_split
from hypermpc.models import build_model, default_config
from hypermpc.plant import EpisodeLog
from hypermpc.training import (Batch, TrainConfig, WindowSet, build_windows,
                               evaluate_prediction, improvement_pct, multi_step_loss,
                               single_step_loss, train, velocity_normalizer)

THETA = np.array([1.0, 0.5, 0.05, 1e-3, 1.0])


def _episode(n):
    z = np.zeros(n)
    return EpisodeLog(dt=0.01, q=z, q_dot=z, tau=z, q_m=z, q_m_dot=z,
                      contact=np.zeros(n, dtype=np.uint8))


def _loss_on(model, batch, loss_fn, **kw):
    tape = ad.Tape()
    with tape:
        watched = model.watch_all(tape)
        loss, info = loss_fn(model, watched, batch, **kw)
    return loss, info


def test_window_count_formula():
    ws = WindowSet([_episode(1000)], history_len=50, horizon=250, stride=5)
    assert len(ws) == 141


def test_stride_equal_to_span_gives_one_window():
    ws = WindowSet([_episode(300)], history_len=50, horizon=250, stride=300)
    assert len(ws) == 1


def test_short_episode_skipped_with_warning():
    messages = []
    ws = WindowSet([_episode(100)], history_len=50, horizon=250, stride=5,
                   log_fn=messages.append)
    assert len(ws) == 0
    assert "skipped" in messages[0]


def test_empty_split_gives_empty_windows():
    ws = WindowSet([], history_len=50, horizon=250, stride=5)
    assert len(ws) == 0


def test_window_layout(tiny_dataset):
    cfg = TrainConfig(epochs=1, stride=7)
    ws = build_windows(tiny_dataset, "train", cfg)
    episodes = load_split(tiny_dataset, "train")
    batch = ws.gather([0])
    ep = episodes[0]
    np.testing.assert_array_equal(batch.hist_q[0], ep.q[:50])
    np.testing.assert_array_equal(batch.x0[0], [ep.q[49], ep.q_dot[49]])
    np.testing.assert_array_equal(batch.fut_tau[0], ep.tau[50:300])
    np.testing.assert_array_equal(batch.fut_q[0], ep.q[50:300])


def test_zero_horizon_loss_is_zero():
    model = build_model(default_config("const_l"), seed=0)
    empty = Batch(*(np.zeros((2, 50)) for _ in range(3)), np.zeros((2, 2)),
                  *(np.zeros((2, 0)) for _ in range(3)))
    loss, _ = _loss_on(model, empty, multi_step_loss)
    assert float(loss.data) == 0.0


def test_const_model_has_no_regularization_term(tiny_dataset):
    cfg = TrainConfig(epochs=1)
    ws = build_windows(tiny_dataset, "train", cfg)
    model = build_model(default_config("const_l", v_norm=velocity_normalizer(tiny_dataset)),
                        seed=0)
    batch = ws.gather(range(4))
    loss, info = _loss_on(model, batch, multi_step_loss)
    np.testing.assert_allclose(float(loss.data), info["pred_error"], rtol=1e-15)


def test_exact_model_on_rigid_dataset_has_tiny_loss(tiny_rigid_dataset):
    # the nominal model class contains the rigid plant: with the true
    # parameters the 250-step prediction error vanishes to integration noise
    cfg = TrainConfig(epochs=1)
    ws = build_windows(tiny_rigid_dataset, "train", cfg)
    v_norm = velocity_normalizer(tiny_rigid_dataset)
    model = build_model(default_config("const_l", v_norm=v_norm), seed=0)
    model.params["log_theta"][:] = np.log(np.array([1.0, 0.5, 0.05, 1e-300, 1.0]))
    batch = ws.gather(range(len(ws)))
    _, info = _loss_on(model, batch, multi_step_loss)
    assert info["pred_error"] < 1e-10
    _, sinfo = _loss_on(model, batch, single_step_loss)
    assert sinfo["pred_error"] < 1e-10


def test_single_step_equals_multi_step_at_horizon_one(tiny_dataset):
    cfg = TrainConfig(epochs=1, horizon_steps=1)
    ws = build_windows(tiny_dataset, "train", cfg)
    model = build_model(default_config("const_l", v_norm=velocity_normalizer(tiny_dataset)),
                        seed=0)
    batch = ws.gather(range(8))
    l_multi, _ = _loss_on(model, batch, multi_step_loss)
    l_single, _ = _loss_on(model, batch, single_step_loss)
    np.testing.assert_allclose(float(l_multi.data), float(l_single.data), rtol=1e-12)


def test_window_accounting(tiny_dataset):
    cfg = TrainConfig(epochs=1)
    ws = build_windows(tiny_dataset, "train", cfg)
    model = build_model(default_config("const_l", v_norm=8.0), seed=0)
    model.params["log_theta"][:] = np.log(np.array([1e-12, 0.5, 0.05, 1e-3, 1.0]))
    batch = ws.gather(range(6))
    _, info = _loss_on(model, batch, multi_step_loss)
    used = int((info["diverged"] < 0).sum())
    assert used + info["skipped"] == 6
    assert info["skipped"] == 6  # vanishing mass diverges every window


def test_training_is_deterministic(tiny_dataset):
    def run():
        cfg = TrainConfig(epochs=2, batch_size=16, seed=5, theta_const_epochs=1)
        model = build_model(default_config("const_l", v_norm=velocity_normalizer(tiny_dataset)),
                            seed=5)
        result = train(model, tiny_dataset, cfg, log_fn=None)
        return result["metrics"][-1]["val_loss"], model.theta_values()

    v1, t1 = run()
    v2, t2 = run()
    assert v1 == v2
    np.testing.assert_array_equal(t1, t2)


def test_metrics_rows_match_epochs(tiny_dataset):
    cfg = TrainConfig(epochs=3, batch_size=32, seed=1)
    model = build_model(default_config("const_l", v_norm=velocity_normalizer(tiny_dataset)),
                        seed=1)
    result = train(model, tiny_dataset, cfg, log_fn=None)
    assert [m["epoch"] for m in result["metrics"]] == [1, 2, 3]
    assert set(result["metrics"][0]) == {"epoch", "train_loss", "val_loss",
                                         "val_pred_error", "lr", "skipped"}


def test_gradient_flow_and_mask_persistence(tiny_dataset):
    cfg = TrainConfig(epochs=1, batch_size=16, seed=3)
    v_norm = velocity_normalizer(tiny_dataset)
    model = build_model(default_config("hyperpm", v_norm=v_norm), seed=3, theta_const=THETA)
    before = model.copy_params()
    masks = {k: v.copy() for k, v in model.masks.items()}
    train(model, tiny_dataset, cfg, log_fn=None)
    changed = {name: not np.array_equal(before[name], model.params[name])
               for name in model.params}
    assert all(changed.values()), f"stuck parameters: {[k for k, v in changed.items() if not v]}"
    for name, mask in masks.items():
        assert (model.params[name][mask == 0] == 0.0).all()


def test_hyperpm_loss_includes_regularizer(tiny_dataset):
    cfg = TrainConfig(epochs=1)
    ws = build_windows(tiny_dataset, "train", cfg)
    v_norm = velocity_normalizer(tiny_dataset)
    model = build_model(default_config("hyperpm", v_norm=v_norm, n_reg=0.05),
                        seed=0, theta_const=THETA)
    from hypermpc.bsplines import basis_matrix
    basis = basis_matrix(model.control_knots, np.arange(250) * 0.01)
    batch = ws.gather(range(4))
    loss, info = _loss_on(model, batch, multi_step_loss, basis=basis)
    assert float(loss.data) > info["pred_error"]


def test_evaluate_prediction_and_improvement(tiny_rigid_dataset):
    cfg = TrainConfig(epochs=1)
    v_norm = velocity_normalizer(tiny_rigid_dataset)
    model = build_model(default_config("const_l", v_norm=v_norm), seed=0)
    report = evaluate_prediction(model, tiny_rigid_dataset, cfg, split="test")
    assert report["windows"] > 0
    assert np.isfinite(report["mean_error"])
    assert improvement_pct(report["mean_error"], report["mean_error"]) == 0.0
    assert improvement_pct(2.0, 1.0) == 50.0


def test_best_validation_checkpoint_restored(tiny_dataset):
    cfg = TrainConfig(epochs=4, batch_size=32, seed=2)
    v_norm = velocity_normalizer(tiny_dataset)
    model = build_model(default_config("const_l", v_norm=v_norm), seed=2)
    result = train(model, tiny_dataset, cfg, log_fn=None)
    best = min(result["metrics"], key=lambda m: m["val_loss"])
    assert result["best_epoch"] == best["epoch"]
    assert result["best_val_loss"] == best["val_loss"]
