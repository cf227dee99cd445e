"""``key = value`` run configuration files."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import fields

from cpr.simulator import SimSpec
from cpr.training import TrainConfig

log = logging.getLogger(__name__)

SIM_KEYS = {"family": str, "N": int, "T": int, "tau": int, "sigma_a": float, "sigma_theta": float,
            "holdout_frac": float}
TRAIN_KEYS = {"model": str, "cell": str, "hidden_dim": int, "lam": float, "alpha": float,
              "learning_rate": float, "batch_size": int, "max_epochs": int, "patience": int}
OTHER_KEYS = {"seed": int, "split": str, "data": str, "checkpoint": str, "out_dir": str, "runs": int,
              "features": str}
KEYS = {**SIM_KEYS, **TRAIN_KEYS, **OTHER_KEYS}


class ConfigError(ValueError):
    pass


def parse_value(key: str, raw: str):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return KEYS[key](raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            out[key] = parse_value(key, raw)
    return out


def write_config(path, values: dict):
    with open(path, "w") as fh:
        for key in KEYS:
            if values.get(key) is not None:
                fh.write(f"{key} = {values[key]}\n")


def parse_split(raw) -> tuple:
    if isinstance(raw, (tuple, list)):
        return tuple(float(x) for x in raw)
    return tuple(float(x) for x in str(raw).split(","))


def _with_defaults(cls, values: dict, keys, what: str):
    kwargs = {}
    for f in fields(cls):
        if f.name in values and f.name in keys:
            kwargs[f.name] = values[f.name]
        elif f.name in keys:
            log.info("%s: %s not set, using default", what, f.name)
    return kwargs


def sim_spec(values: dict) -> SimSpec:
    kwargs = _with_defaults(SimSpec, values, SIM_KEYS, "simulation")
    return SimSpec(seed=values.get("seed", 0), **kwargs).resolved()


def train_config(values: dict) -> TrainConfig:
    kwargs = _with_defaults(TrainConfig, values, TRAIN_KEYS, "training")
    if values.get("split") is not None:
        kwargs["split"] = parse_split(values["split"])
    return TrainConfig(seed=values.get("seed", 0), **kwargs)


def config_hash(values: dict) -> str:
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()
