"""Experiment configuration: presets, JSON files and command-line overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .optim import TrainConfig
from .siren_net import SirenConfig


class ConfigError(ValueError):
    pass


FLOW_SOURCES = ("auto", "file", "synth", "horn-schunck")

SCHEMA = {
    "model": {"depth", "width", "omega"},
    "train": {"max_lr", "epochs", "batch_size", "seed", "precision", "beta1", "beta2", "eps",
              "checkpoint_every"},
    "loss": {"lambda"},
    "data": {"root", "frames", "flow_source", "flow_dir", "scene_spec", "stride",
             "hs_alpha", "hs_iterations"},
    "eval": {"every"},
}
TOP_LEVEL = set(SCHEMA) | {"preset", "output_dir"}

BASE = {
    "model": {"depth": 9, "width": 512, "omega": 30.0},
    "train": {"max_lr": 1e-5, "epochs": 5000, "batch_size": 4096, "seed": 0,
              "precision": "float64", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
              "checkpoint_every": 0},
    "loss": {"lambda": 0.12},
    "data": {"root": None, "frames": None, "flow_source": "auto", "flow_dir": None,
             "scene_spec": None, "stride": 2, "hs_alpha": 0.1, "hs_iterations": 1000},
    "eval": {"every": 0},
    "output_dir": "run",
}

PRESETS = {
    # defaults of the full-resolution protocol
    "paper-default": {
        "model": {"depth": 9, "width": 512, "omega": 30.0},
        "train": {"max_lr": 1e-5, "epochs": 5000},
        "loss": {"lambda": 0.12},
    },
    # best configuration from the width/depth/omega ablations
    "paper-final": {
        "model": {"depth": 6, "width": 720, "omega": 25.0},
        "train": {"max_lr": 3.6e-5, "epochs": 15000},
        "loss": {"lambda": 0.12},
    },
    # 48x48x16 synthetic scenes in well under a minute per run on one core
    "desk": {
        "model": {"depth": 4, "width": 64, "omega": 30.0},
        "train": {"max_lr": 1e-3, "epochs": 60, "batch_size": 1024},
        "loss": {"lambda": 0.12},
    },
    "desk-tiny": {
        "model": {"depth": 3, "width": 16, "omega": 30.0},
        "train": {"max_lr": 1e-3, "epochs": 3, "batch_size": 512},
        "loss": {"lambda": 0.12},
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config section {where}{key!r} must be a mapping")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def check_keys(raw: dict) -> None:
    for key, val in raw.items():
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown config key {key!r}")
        if key in SCHEMA:
            if not isinstance(val, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            extra = set(val) - SCHEMA[key]
            if extra:
                raise ConfigError(f"unknown config key(s) in {key!r}: {sorted(extra)}")


@dataclass
class ExperimentConfig:
    model: SirenConfig
    train: TrainConfig
    data: dict
    eval_every: int
    output_dir: Path
    preset: str | None
    raw: dict

    @property
    def lam(self) -> float:
        return self.train.lam

    def resolved(self) -> dict:
        return copy.deepcopy(self.raw)


def resolve(file_cfg: dict | None = None, preset: str | None = None,
            overrides: dict | None = None) -> ExperimentConfig:
    """Layer base defaults, a preset, a config file and overrides, then validate."""
    file_cfg = dict(file_cfg or {})
    check_keys(file_cfg)
    preset = preset or file_cfg.pop("preset", None)
    file_cfg.pop("preset", None)
    raw = copy.deepcopy(BASE)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        raw = _merge(raw, PRESETS[preset])
    raw = _merge(raw, file_cfg)
    if overrides:
        raw = _merge(raw, overrides)
    raw["preset"] = preset
    return build(raw)


def build(raw: dict) -> ExperimentConfig:
    try:
        model = SirenConfig(int(raw["model"]["depth"]), int(raw["model"]["width"]),
                            float(raw["model"]["omega"]))
        t = raw["train"]
        train = TrainConfig(
            max_lr=float(t["max_lr"]), epochs=int(t["epochs"]), batch_size=int(t["batch_size"]),
            lam=float(raw["loss"]["lambda"]), seed=int(t["seed"]), precision=t["precision"],
            beta1=float(t["beta1"]), beta2=float(t["beta2"]), eps=float(t["eps"]),
            eval_every=int(raw["eval"]["every"]), checkpoint_every=int(t["checkpoint_every"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data = raw["data"]
    if data["flow_source"] not in FLOW_SOURCES:
        raise ConfigError(f"flow_source must be one of {FLOW_SOURCES}, got {data['flow_source']!r}")
    if int(data["stride"]) < 2:
        raise ConfigError("data.stride must be >= 2")
    if float(data["hs_alpha"]) <= 0 or int(data["hs_iterations"]) < 1:
        raise ConfigError("Horn-Schunck alpha must be positive and iterations >= 1")
    return ExperimentConfig(model, train, data, train.eval_every, Path(raw["output_dir"]),
                            raw.get("preset"), raw)


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return cfg
