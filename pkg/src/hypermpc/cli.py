"""Command-line front end: dataset generation, training, evaluation, MPC runs.

Exit codes: 0 success, 2 usage/config error, 3 environment/IO error. Every
command writes a run.json provenance record (argv, resolved config, hashes,
seeds, versions) into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernel_backend
from .checkpoints import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .control_loop import run_closed_loop, summarize
from .dataset import build_dataset, load_manifest, manifest_hash
from .models import MODEL_KINDS, build_model, default_config
from .training import (evaluate_prediction, fit_theta_const, improvement_pct, train,
                       velocity_normalizer)

USAGE_ERROR = 2
IO_ERROR = 3

SIGMA_SWEEP = (0.05, 0.2, 0.5)


class CliError(Exception):
    def __init__(self, message: str, code: int = USAGE_ERROR):
        super().__init__(message)
        self.code = code


def _write_run_record(out_dir: Path, args, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "argv": list(args._argv),
        "config": cfg.as_dict(),
        "config_hash": cfg.hash(),
        "seed": args.seed,
        "profile": args.profile,
        "version": __version__,
        "kernel_backend": kernel_backend,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(out_dir / "run.json", "w") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)


def _resolved_config(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides = {"dataset": {"seed": args.seed}, "train": {"seed": args.seed},
                     "mpc": {"seed": args.seed}}
    return load_config(args.config, profile=args.profile, overrides=overrides)


def _write_csv(path, rows: list, columns: list) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_table(rows: list, columns: list) -> str:
    """Fixed-width text table over a list of dicts."""
    cells = [[str(c) for c in columns]]
    for row in rows:
        cells.append([f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c])
                      for c in columns])
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = []
    for i, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _model_label(model) -> str:
    return "hyperpm-eac" if getattr(model.cfg, "eac", False) else model.kind


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    episodes = args.episodes if args.episodes is not None else cfg.dataset.episodes
    try:
        manifest = build_dataset(out, settings=cfg.sim, num_episodes=episodes,
                                 seed=cfg.dataset.seed, duration=cfg.dataset.duration,
                                 ground_truth=cfg.dataset.ground_truth)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", IO_ERROR) from exc
    counts = {s: sum(e["split"] == s for e in manifest["episodes"]) for s in ("train", "val", "test")}
    print(f"generated {episodes} episodes -> {out}")
    print(f"split sizes: train {counts['train']}, val {counts['val']}, test {counts['test']}")
    _write_run_record(out, args, cfg)
    return 0


def _prepare_model(kind: str, cfg: RunConfig, manifest, theta_const_path):
    v_norm = velocity_normalizer(manifest)
    tc = cfg.train
    model_cfg = default_config(
        kind, gravity=cfg.sim.gravity, v_norm=v_norm, history_len=tc.history_len,
        t_p=tc.horizon_steps * 0.01, sigma_robust=tc.sigma_robust, n_reg=tc.n_reg)
    theta_const = None
    if kind in ("hd_s", "hd_l", "hyperpm"):
        if theta_const_path is not None:
            ref_model, _ = load_checkpoint(theta_const_path)
            theta_const = (ref_model.theta_values() if hasattr(ref_model, "theta_values")
                           else np.array(ref_model.theta_const))
        else:
            print(f"[{kind}] fitting nominal parameters "
                  f"({tc.theta_const_epochs} epochs of a constant model)")
            theta_const = fit_theta_const(manifest, tc, kind, log_fn=None)
    return build_model(model_cfg, seed=tc.seed, theta_const=theta_const), model_cfg


def _train_one(kind: str, cfg: RunConfig, manifest, out_dir: Path,
               theta_const_path=None, name: str | None = None, eac: bool = False):
    model, model_cfg = _prepare_model(kind, cfg, manifest, theta_const_path)
    if eac:
        model.cfg = model.cfg.replace(eac=True)
    result = train(model, manifest, cfg.train)
    name = name or (kind if not eac else f"{kind}_eac")
    ckpt = out_dir / f"{name}.json"
    save_checkpoint(ckpt, model, seed=cfg.train.seed, manifest_hash=manifest_hash(manifest),
                    extra={"best_epoch": result["best_epoch"],
                           "best_val_loss": result["best_val_loss"]})
    _write_csv(out_dir / f"{name}_metrics.csv", result["metrics"],
               ["epoch", "train_loss", "val_loss", "val_pred_error", "lr", "skipped"])
    return model, result, ckpt


def cmd_train(args, cfg: RunConfig) -> int:
    if args.model not in MODEL_KINDS:
        raise CliError(f"unknown model kind '{args.model}'; "
                       f"valid kinds: {', '.join(MODEL_KINDS)}")
    if args.epochs is not None:
        cfg.train = cfg.train.replace(epochs=args.epochs)
    manifest = load_manifest(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, result, ckpt = _train_one(args.model, cfg, manifest, out, args.theta_const)
    print(f"[{args.model}] best val loss {result['best_val_loss']:.6f} "
          f"at epoch {result['best_epoch']}; checkpoint -> {ckpt}")
    _write_run_record(out, args, cfg)
    return 0


def cmd_eval_pred(args, cfg: RunConfig) -> int:
    if not args.checkpoints:
        raise CliError("eval-pred needs at least one checkpoint")
    manifest = load_manifest(args.dataset)
    mhash = manifest_hash(manifest)
    rows = []
    for path in args.checkpoints:
        model, doc = load_checkpoint(path)
        if doc.get("manifest_hash") and doc["manifest_hash"] != mhash:
            print(f"warning: {path} was trained on a different dataset "
                  f"({doc['manifest_hash']} != {mhash}); proceeding", file=sys.stderr)
        report = evaluate_prediction(model, manifest, cfg.train, split=args.split)
        report["model"] = _model_label(model)
        rows.append(report)
    baseline = next((r for r in rows if r["model"] == "const_s"), rows[0])
    for row in rows:
        row["improvement_pct_vs_const_s"] = improvement_pct(baseline["mean_error"],
                                                            row["mean_error"])
    columns = ["model", "split", "mean_error", "std_error",
               "improvement_pct_vs_const_s", "windows", "diverged_windows"]
    out = Path(args.out)
    _write_csv(out / "prediction_report.csv", rows, columns)
    print(format_table(rows, columns[:5]))
    _write_run_record(out, args, cfg)
    return 0


def cmd_run_mpc(args, cfg: RunConfig) -> int:
    kind = args.model
    if kind not in MODEL_KINDS + ("oracle",):
        raise CliError(f"unknown model kind '{kind}'; valid kinds: "
                       f"{', '.join(MODEL_KINDS + ('oracle',))}")
    if kind == "res":
        raise CliError("the residual model is not wired into the MPC loop "
                       "(its correction term is outside the solver's model class)")
    if args.checkpoint is None:
        raise CliError(f"run-mpc {kind} needs --checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    if args.episodes is not None:
        cfg.mpc = cfg.mpc.replace(episodes=args.episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        results = run_closed_loop(kind, model, cfg.sim, cfg.mpc, log_fn=print)
    except ValueError as exc:
        raise CliError(str(exc), USAGE_ERROR) from exc
    summary = summarize(kind, results)
    columns = ["model", "cost_mean", "cost_std", "success_rate", "solver_failure_rate",
               "episodes"]
    _write_csv(out / f"mpc_summary_{kind}.csv", [summary], columns)
    for r in results:
        _write_csv(out / f"mpc_{kind}_episode_{r.episode:02d}.csv",
                   [dict(zip(r.log.keys(), vals)) for vals in zip(*r.log.values())],
                   list(r.log.keys()))
    print(format_table([summary], columns))
    _write_run_record(out, args, cfg)
    return 0


def cmd_ablate(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "eac":
        rows = _ablate_eac(args, cfg, manifest, out)
        columns = ["model", "mean_error", "std_error", "deterioration_pct"]
        _write_csv(out / "ablation_eac.csv", rows, columns)
        print(format_table(rows, columns))
    else:
        rows = _ablate_sigma(args, cfg, manifest, out)
        columns = ["sigma_robust", "train_loss", "val_loss", "val_pred_error"]
        _write_csv(out / "ablation_sigma.csv", rows, columns)
        print(format_table(rows, columns))
    _write_run_record(out, args, cfg)
    return 0


def _ablate_eac(args, cfg: RunConfig, manifest, out: Path) -> list:
    if args.baseline is not None:
        base_model, _ = load_checkpoint(args.baseline)
        theta_path = args.baseline if args.theta_const is None else args.theta_const
    else:
        base_model, _, _ = _train_one("hyperpm", cfg, manifest, out, args.theta_const)
        theta_path = args.theta_const
    eac_model, _, _ = _train_one("hyperpm", cfg, manifest, out,
                                 theta_const_path=theta_path, eac=True)
    if args.baseline is not None and theta_path == args.baseline:
        eac_model.theta_const = np.array(base_model.theta_const)
    full = evaluate_prediction(base_model, manifest, cfg.train)
    ablated = evaluate_prediction(eac_model, manifest, cfg.train)
    rows = [
        {"model": "hyperpm", "mean_error": full["mean_error"],
         "std_error": full["std_error"], "deterioration_pct": 0.0},
        {"model": "hyperpm-eac", "mean_error": ablated["mean_error"],
         "std_error": ablated["std_error"],
         "deterioration_pct": 100.0 * (1.0 - full["mean_error"] / ablated["mean_error"])},
    ]
    return rows


def _ablate_sigma(args, cfg: RunConfig, manifest, out: Path) -> list:
    theta_path = args.theta_const
    rows = []
    for sigma in SIGMA_SWEEP:
        run_cfg = RunConfig(sim=cfg.sim, dataset=cfg.dataset,
                            train=cfg.train.replace(sigma_robust=sigma), mpc=cfg.mpc)
        _, result, _ = _train_one("hyperpm", run_cfg, manifest, out,
                                  theta_const_path=theta_path,
                                  name=f"hyperpm_sigma{sigma:g}")
        last = result["metrics"][-1]
        best = min(result["metrics"], key=lambda m: m["val_loss"])
        rows.append({"sigma_robust": sigma, "train_loss": last["train_loss"],
                     "val_loss": best["val_loss"], "val_pred_error": best["val_pred_error"]})
    return rows


def cmd_report(args, cfg: RunConfig) -> int:
    sections = []
    if args.pred is not None:
        with open(args.pred) as fh:
            rows = list(csv.DictReader(fh))
        sections.append(("Long-horizon prediction", rows))
    if args.mpc:
        rows = []
        for path in args.mpc:
            with open(path) as fh:
                rows.extend(csv.DictReader(fh))
        sections.append(("MPC swing-up", rows))
    if not sections:
        raise CliError("report needs --pred and/or --mpc inputs")
    for title, rows in sections:
        print(f"== {title} ==")
        print(format_table(rows, list(rows[0].keys())))
        print()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypermpc",
        description="Time-varying parameter forecasting for pendulum swing-up MPC")
    parser.add_argument("--config", default=None, help="path to a [section] key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override every section seed")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--profile", choices=("paper", "desk"), default="paper")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate and persist a dataset")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one model kind")
    p.add_argument("model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--theta-const", default=None,
                   help="checkpoint supplying the nominal parameter vector")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-pred", help="long-horizon prediction report")
    p.add_argument("checkpoints", nargs="*")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_eval_pred)

    p = sub.add_parser("run-mpc", help="closed-loop swing-up evaluation")
    p.add_argument("model")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_run_mpc)

    p = sub.add_parser("ablate", help="ablation studies")
    p.add_argument("what", choices=("eac", "sigma"))
    p.add_argument("--dataset", required=True)
    p.add_argument("--baseline", default=None, help="existing hyperpm checkpoint (eac)")
    p.add_argument("--theta-const", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="combine evaluation CSVs into text tables")
    p.add_argument("--pred", default=None)
    p.add_argument("--mpc", nargs="*", default=[])
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    args._argv = argv
    try:
        cfg = _resolved_config(args)
        return args.fn(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return IO_ERROR
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
