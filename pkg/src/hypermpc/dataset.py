"""Dataset generation: spline-excited episodes, CSV persistence, manifest.

Episodes are excited with random clamped cubic splines (control points drawn
uniform from [-2, 2], curve clipped to [-1, 1]) so the torque saturates often
while staying too weak for a direct swing-up. Whole episodes are split
train/val/test 70/20/10; everything is deterministic given the root seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .bsplines import KnotVector, SplineCurve
from .plant import EpisodeLog, PlantState, SimSettings, simulate

EXCITATION_POINTS = 15
EPISODE_DURATION = 10.0
SPLIT_RATIOS = (0.7, 0.2, 0.1)

EPISODE_HEADER_GT = "t,q,q_dot,tau,q_m,q_m_dot,contact"
EPISODE_HEADER = "t,q,q_dot,tau"


def sample_excitation(seed, duration: float = EPISODE_DURATION):
    """Random spline torque signal over [0, duration], clipped to [-1, 1].

    `seed` may be an int or an existing Generator. Returns control_fn(t).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    points = rng.uniform(-2.0, 2.0, EXCITATION_POINTS)
    kv = KnotVector.clamped_uniform(3, EXCITATION_POINTS, 0.0, duration)
    curve = SplineCurve(knots=kv, control_points=points[:, None])

    def control_fn(t):
        return float(np.clip(curve.evaluate([t])[0, 0], -1.0, 1.0))

    return control_fn


def split_episodes(num_episodes: int) -> list:
    """Whole-episode split labels in order: 70% train, 20% val, 10% test."""
    n_train = round(num_episodes * SPLIT_RATIOS[0])
    n_val = round(num_episodes * SPLIT_RATIOS[1])
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (num_episodes - n_train - n_val)
    return labels


def write_episode_csv(path, log: EpisodeLog, ground_truth: bool = True):
    t = log.times
    if ground_truth:
        cols = np.column_stack([t, log.q, log.q_dot, log.tau, log.q_m, log.q_m_dot,
                                log.contact.astype(np.float64)])
        header = EPISODE_HEADER_GT
    else:
        cols = np.column_stack([t, log.q, log.q_dot, log.tau])
        header = EPISODE_HEADER
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in cols:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_episode_csv(path) -> EpisodeLog:
    with open(path) as fh:
        header = fh.readline().strip()
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    names = header.split(",")
    col = {name: data[:, i] for i, name in enumerate(names)}
    t = col["t"]
    dt = float(t[1] - t[0]) if len(t) > 1 else 0.01
    zeros = np.zeros(len(t))
    return EpisodeLog(
        dt=dt, q=col["q"], q_dot=col["q_dot"], tau=col["tau"],
        q_m=col.get("q_m", zeros), q_m_dot=col.get("q_m_dot", zeros),
        contact=col.get("contact", zeros).astype(np.uint8),
    )


def _generate_episode(episode_seed: int, settings: SimSettings, duration: float):
    """One excited episode; on divergence, retries with incremented sub-seeds."""
    for attempt in range(20):
        rng = np.random.default_rng(np.random.SeedSequence((episode_seed, attempt)))
        q0 = rng.uniform(-np.pi, np.pi)
        qd0 = rng.uniform(-1.0, 1.0)
        control_fn = sample_excitation(rng, duration)
        initial = PlantState(q=q0, q_dot=qd0, q_m=q0, q_m_dot=qd0)
        log = simulate(initial, control_fn, duration, settings, seed=episode_seed)
        if not log.failed:
            return log, attempt
    raise RuntimeError(f"episode seed {episode_seed}: 20 consecutive diverged simulations")


def build_dataset(out_dir, settings: SimSettings = SimSettings(), num_episodes: int = 360,
                  seed: int = 0, duration: float = EPISODE_DURATION,
                  ground_truth: bool = True, log_fn=print) -> dict:
    """Generate episodes and a manifest under `out_dir`; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = split_episodes(num_episodes)
    episodes = []
    for idx in range(num_episodes):
        episode_seed = seed * 1_000_003 + idx
        log, attempt = _generate_episode(episode_seed, settings, duration)
        if attempt > 0 and log_fn is not None:
            log_fn(f"episode {idx}: regenerated {attempt} time(s) after divergence")
        name = f"episode_{idx:04d}.csv"
        write_episode_csv(out / name, log, ground_truth=ground_truth)
        episodes.append({
            "file": name,
            "split": labels[idx],
            "seed": episode_seed,
            "ground_truth": bool(ground_truth),
            "regenerations": attempt,
        })
    manifest = {
        "version": 1,
        "seed": seed,
        "duration": duration,
        "rate_hz": 100,
        "settings": dataclasses.asdict(settings),
        "episodes": episodes,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["_dir"] = str(Path(dataset_dir))
    return manifest


def manifest_hash(manifest: dict) -> str:
    clean = {k: v for k, v in manifest.items() if not k.startswith("_")}
    blob = json.dumps(clean, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def manifest_settings(manifest: dict) -> SimSettings:
    return SimSettings(**manifest["settings"])


def load_split(manifest: dict, split: str) -> list:
    """Episode logs for one split, in manifest order."""
    base = Path(manifest["_dir"])
    logs = []
    for ep in manifest["episodes"]:
        if ep["split"] == split:
            logs.append(read_episode_csv(base / ep["file"]))
    return logs
