"""Run configuration: [section] key = value files over paper-valued defaults.

Every default equals the published value where one exists; unknown sections
or keys are rejected. The `desk` profile shrinks the dataset and epoch counts
for commodity-hardware runs; `paper` keeps the full published scale.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .ocp import MPCConfig
from .plant import SimSettings
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration file or unknown section/key."""


@dataclass
class DatasetParams:
    episodes: int = 360
    duration: float = 10.0
    seed: int = 0
    ground_truth: bool = True


@dataclass
class RunConfig:
    sim: SimSettings
    dataset: DatasetParams
    train: TrainConfig
    mpc: MPCConfig

    def as_dict(self) -> dict:
        return {
            "sim": dataclasses.asdict(self.sim),
            "dataset": dataclasses.asdict(self.dataset),
            "train": dataclasses.asdict(self.train),
            "mpc": dataclasses.asdict(self.mpc),
        }

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "sim": SimSettings,
    "dataset": DatasetParams,
    "train": TrainConfig,
    "mpc": MPCConfig,
}

PROFILES = {
    "paper": {},
    "desk": {"dataset": {"episodes": 100}, "train": {"epochs": 500}},
}


def _parse_value(raw: str, key: str):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == '"' and raw[-1] == '"':
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"key '{key}': cannot parse value {raw!r} "
                          "(expected integer, real, boolean, or quoted string)") from None


def _coerce(value, target_type, key: str):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}': expected integer, got {value!r}")
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    if isinstance(value, target_type) and not isinstance(value, bool):
        return value
    raise ConfigError(f"key '{key}': expected {target_type.__name__}, got {value!r}")


def load_config(path=None, profile: str = "paper", overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, a profile, an optional file, and overrides.

    Precedence (low to high): dataclass defaults, profile, config file,
    explicit overrides (e.g. --seed).
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile '{profile}'; valid: {', '.join(PROFILES)}")
    merged: dict = {name: dict(values) for name, values in PROFILES[profile].items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]; valid: {', '.join(_SECTIONS)}")
            for key, raw in parser.items(section):
                merged.setdefault(section, {})[key] = _parse_value(raw, f"{section}.{key}")
    for section, values in (overrides or {}).items():
        merged.setdefault(section, {}).update(values)
    built = {}
    for section, cls in _SECTIONS.items():
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in merged.get(section, {}).items():
            if key not in fields:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            target = {f.name: f for f in dataclasses.fields(cls)}[key]
            kwargs[key] = _coerce(value, _python_type(target), f"{section}.{key}")
        try:
            built[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section [{section}]: {exc}") from exc
    return RunConfig(sim=built["sim"], dataset=built["dataset"],
                     train=built["train"], mpc=built["mpc"])


def _python_type(field) -> type:
    mapping = {"int": int, "float": float, "bool": bool, "str": str}
    name = field.type if isinstance(field.type, str) else field.type.__name__
    if name not in mapping:
        raise ConfigError(f"field {field.name} has unsupported type {name}")
    return mapping[name]
