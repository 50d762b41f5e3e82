"""Checkpoint persistence: one JSON document per trained model.

Weights are stored as named flat float lists with shapes; JSON float
round-tripping is exact in Python, so save -> load -> save is bitwise stable.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .models import ModelBase, ModelConfig, build_model

FORMAT_VERSION = 1


def save_checkpoint(path, model: ModelBase, seed: int = 0, manifest_hash: str = "",
                    extra: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": dataclasses.asdict(model.cfg),
        "theta_const": (None if not hasattr(model, "theta_const")
                        else [float(v) for v in model.theta_const]),
        "weights": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in model.params.items()
        },
        "seed": seed,
        "manifest_hash": manifest_hash,
    }
    if extra:
        doc["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, document)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {doc.get('format_version')}")
    cfg = ModelConfig(**doc["config"])
    theta_const = doc.get("theta_const")
    model = build_model(cfg, seed=doc.get("seed", 0),
                        theta_const=None if theta_const is None else np.array(theta_const))
    for name, entry in doc["weights"].items():
        if name not in model.params:
            raise ValueError(f"checkpoint weight '{name}' unknown for model kind {cfg.kind}")
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != model.params[name].shape:
            raise ValueError(f"checkpoint weight '{name}' shape {arr.shape} != "
                             f"expected {model.params[name].shape}")
        model.params[name][:] = arr
    return model, doc
