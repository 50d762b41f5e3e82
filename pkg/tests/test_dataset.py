import json
from pathlib import Path

import numpy as np
import pytest

from hypermpc.bsplines import KnotVector, SplineCurve
from hypermpc.dataset import (EPISODE_HEADER, EPISODE_HEADER_GT, build_dataset,
                              load_manifest, load_split, manifest_hash,
                              read_episode_csv, sample_excitation, split_episodes,
                              write_episode_csv)
from hypermpc.plant import PlantState, SimSettings, simulate

# 1e-4 steps keep dataset tests quick while staying stable for the stiff contact
FAST = SimSettings(step=1e-4)


def test_split_ratios_at_paper_scale():
    labels = split_episodes(360)
    assert labels.count("train") == 252
    assert labels.count("val") == 72
    assert labels.count("test") == 36


def test_split_ratios_at_desk_scale():
    labels = split_episodes(100)
    assert (labels.count("train"), labels.count("val"), labels.count("test")) == (70, 20, 10)


def test_excitation_convex_hull_and_clipping():
    kv = KnotVector.clamped_uniform(3, 15, 0.0, 10.0)
    zero_curve = SplineCurve(knots=kv, control_points=np.zeros((15, 1)))
    t = np.linspace(0, 10, 101)
    np.testing.assert_array_equal(np.clip(zero_curve.evaluate(t), -1, 1), np.zeros((101, 1)))
    high_curve = SplineCurve(knots=kv, control_points=np.full((15, 1), 2.0))
    np.testing.assert_allclose(np.clip(high_curve.evaluate(t), -1, 1), 1.0)


def test_excitation_seeds_are_distinct():
    fa = sample_excitation(1)
    fb = sample_excitation(2)
    t = np.linspace(0.0, 10.0, 1000)
    va = np.array([fa(x) for x in t])
    vb = np.array([fb(x) for x in t])
    assert np.mean(va != vb) > 0.9


def test_excitation_stays_in_bounds():
    f = sample_excitation(3)
    vals = np.array([f(x) for x in np.linspace(0, 10, 500)])
    assert vals.min() >= -1.0 and vals.max() <= 1.0


def test_episode_csv_round_trip(tmp_path):
    log = simulate(PlantState(q=0.5), lambda t: np.sin(t), 1.0, FAST)
    path = tmp_path / "ep.csv"
    write_episode_csv(path, log, ground_truth=True)
    back = read_episode_csv(path)
    np.testing.assert_array_equal(back.q, log.q)
    np.testing.assert_array_equal(back.q_dot, log.q_dot)
    np.testing.assert_array_equal(back.tau, log.tau)
    np.testing.assert_array_equal(back.q_m, log.q_m)
    np.testing.assert_array_equal(back.contact, log.contact)


def test_observation_stream_excludes_hidden_state(tmp_path):
    log = simulate(PlantState(q=0.5), lambda t: 0.3, 1.0, FAST)
    path = tmp_path / "obs.csv"
    write_episode_csv(path, log, ground_truth=False)
    header = path.read_text().splitlines()[0]
    assert header == EPISODE_HEADER
    assert "q_m" not in header
    back = read_episode_csv(path)
    np.testing.assert_array_equal(back.q, log.q)
    np.testing.assert_array_equal(back.q_m, np.zeros(len(log)))


def test_build_dataset_deterministic(tmp_path):
    m1 = build_dataset(tmp_path / "a", settings=FAST, num_episodes=4, seed=9,
                       duration=2.0, log_fn=None)
    m2 = build_dataset(tmp_path / "b", settings=FAST, num_episodes=4, seed=9,
                       duration=2.0, log_fn=None)
    assert manifest_hash(m1) == manifest_hash(m2)
    for ep in m1["episodes"]:
        a = (tmp_path / "a" / ep["file"]).read_bytes()
        b = (tmp_path / "b" / ep["file"]).read_bytes()
        assert a == b


def test_build_dataset_episode_shape(tmp_path):
    build_dataset(tmp_path / "d", settings=FAST, num_episodes=3, seed=1,
                  duration=2.0, log_fn=None)
    manifest = load_manifest(tmp_path / "d")
    assert len(manifest["episodes"]) == 3
    logs = load_split(manifest, "train")
    assert len(logs) == 2  # 3 episodes -> 2/0/1 split
    assert all(len(log) == 200 for log in logs)
    header = (tmp_path / "d" / manifest["episodes"][0]["file"]).read_text().splitlines()[0]
    assert header == EPISODE_HEADER_GT


def test_manifest_records_settings(tmp_path):
    build_dataset(tmp_path / "d", settings=FAST, num_episodes=2, seed=0,
                  duration=1.0, log_fn=None)
    manifest = load_manifest(tmp_path / "d")
    assert manifest["settings"]["step"] == 1e-4
    assert manifest["rate_hz"] == 100
    # hash is stable against the loader's bookkeeping fields
    direct = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest_hash(manifest) == manifest_hash(direct)
