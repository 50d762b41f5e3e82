import json
from pathlib import Path

import numpy as np
import pytest

from hypermpc.checkpoints import load_checkpoint, save_checkpoint
from hypermpc.cli import main
from hypermpc.models import build_model, default_config

FAST_CFG = """\
[sim]
step = 1e-4

[dataset]
episodes = 6
duration = 4.0

[train]
epochs = 2
batch_size = 32
theta_const_epochs = 1

[mpc]
duration = 0.5
episodes = 1
horizon_steps = 40
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "run.cfg").write_text(FAST_CFG)
    code = main(["--config", str(root / "run.cfg"), "--seed", "4", "--out",
                 str(root / "data"), "gen-data"])
    assert code == 0
    return root


def _cfg_args(root, out):
    return ["--config", str(root / "run.cfg"), "--seed", "4", "--out", str(out)]


def test_gen_data_written(workdir):
    manifest = json.loads((workdir / "data" / "manifest.json").read_text())
    assert len(manifest["episodes"]) == 6
    assert (workdir / "data" / "run.json").exists()


def test_gen_data_deterministic(workdir, tmp_path):
    code = main(_cfg_args(workdir, tmp_path / "data2") + ["gen-data"])
    assert code == 0
    a = (workdir / "data" / "episode_0000.csv").read_bytes()
    b = (tmp_path / "data2" / "episode_0000.csv").read_bytes()
    assert a == b


def test_train_writes_metrics_and_checkpoint(workdir):
    out = workdir / "train_const"
    code = main(_cfg_args(workdir, out)
                + ["train", "const_s", "--dataset", str(workdir / "data"), "--epochs", "1"])
    assert code == 0
    metrics = (out / "const_s_metrics.csv").read_text().strip().splitlines()
    assert metrics[0] == "epoch,train_loss,val_loss,val_pred_error,lr,skipped"
    assert len(metrics) == 2  # header + exactly one epoch row
    assert (out / "const_s.json").exists()
    record = json.loads((out / "run.json").read_text())
    assert record["command"] == "train"
    assert record["seed"] == 4


def test_unknown_model_kind_exits_2(workdir):
    code = main(_cfg_args(workdir, workdir / "x")
                + ["train", "lstm", "--dataset", str(workdir / "data")])
    assert code == 2


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nepochs = banana\n")
    code = main(["--config", str(bad), "--out", str(tmp_path), "gen-data"])
    assert code == 2


def test_unwritable_output_exits_3(workdir):
    code = main(_cfg_args(workdir, "/proc/hypermpc_forbidden") + ["gen-data"])
    assert code == 3


def test_checkpoint_round_trip_bitwise(tmp_path):
    model = build_model(default_config("hyperpm"), seed=1,
                        theta_const=np.array([1.0, 0.5, 0.05, 1e-3, 1.0]))
    p1 = tmp_path / "a.json"
    p2 = tmp_path / "b.json"
    save_checkpoint(p1, model, seed=1, manifest_hash="abc")
    loaded, doc = load_checkpoint(p1)
    save_checkpoint(p2, loaded, seed=doc["seed"], manifest_hash=doc["manifest_hash"])
    assert p1.read_bytes() == p2.read_bytes()
    for name in model.params:
        np.testing.assert_array_equal(model.params[name], loaded.params[name])


def test_eval_pred_self_improvement_zero(workdir):
    out = workdir / "evalout"
    ckpt = workdir / "train_const" / "const_s.json"
    code = main(_cfg_args(workdir, out)
                + ["eval-pred", str(ckpt), "--dataset", str(workdir / "data")])
    assert code == 0
    rows = (out / "prediction_report.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    row = dict(zip(header, rows[1].split(",")))
    assert row["model"] == "const_s"
    assert float(row["improvement_pct_vs_const_s"]) == 0.0


def test_eval_pred_requires_checkpoints(workdir):
    code = main(_cfg_args(workdir, workdir / "x") + ["eval-pred", "--dataset",
                                                     str(workdir / "data")])
    assert code == 2


def test_run_mpc_deterministic_and_logged(workdir):
    ckpt = workdir / "train_const" / "const_s.json"
    out1 = workdir / "mpc1"
    out2 = workdir / "mpc2"
    for out in (out1, out2):
        code = main(_cfg_args(workdir, out)
                    + ["run-mpc", "const_s", "--checkpoint", str(ckpt), "--episodes", "1"])
        assert code == 0
    ep1 = (out1 / "mpc_const_s_episode_00.csv").read_text().splitlines()
    ep2 = (out2 / "mpc_const_s_episode_00.csv").read_text().splitlines()
    header = ep1[0].split(",")
    assert header == ["t", "q", "q_dot", "tau", "u", "stage_cost", "solve_ms", "solver_ok"]
    skip = header.index("solve_ms")  # wall-clock timing varies between runs
    for r1, r2 in zip(ep1[1:], ep2[1:]):
        c1 = [v for i, v in enumerate(r1.split(",")) if i != skip]
        c2 = [v for i, v in enumerate(r2.split(",")) if i != skip]
        assert c1 == c2


def test_run_mpc_rejects_residual_model(workdir):
    code = main(_cfg_args(workdir, workdir / "x")
                + ["run-mpc", "res", "--checkpoint", "nope.json"])
    assert code == 2


def test_run_mpc_unknown_kind_lists_valid(workdir, capsys):
    code = main(_cfg_args(workdir, workdir / "x") + ["run-mpc", "warp", "--checkpoint", "x"])
    assert code == 2
    assert "oracle" in capsys.readouterr().err


def test_report_formats_tables(workdir, capsys, tmp_path):
    pred = tmp_path / "pred.csv"
    pred.write_text("model,mean_error\nconst_s,0.5\n")
    code = main(["--out", str(tmp_path), "report", "--pred", str(pred)])
    assert code == 0
    out = capsys.readouterr().out
    assert "Long-horizon prediction" in out
    assert "const_s" in out


def test_report_requires_inputs(tmp_path):
    assert main(["--out", str(tmp_path), "report"]) == 2
