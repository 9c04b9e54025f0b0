"""JSON run configuration with dotted ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Optional, Sequence

from latentflow.config import PRESETS, ModelConfig
from latentflow.errors import ConfigError
from latentflow.harness.optim import OptimConfig
from latentflow.harness.train import PRETRAIN_OPTIM, PretrainConfig, TrainConfig
from latentflow.mcva import MCVAConfig

DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "model": {},
    "data": {"n": 64, "size": [96, 96], "motion": "smooth", "max_magnitude": 8.0, "seed": 0},
    "train": {"steps": 2000, "gamma": 0.8, "log_every": 1},
    "pretrain": {"steps": 500, "log_every": 1, "batch_size": 8, "optim": dict(PRETRAIN_OPTIM)},
    "mcva": {},
    "optim": {},
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = parse_value(raw)
    return cfg


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = (), seed: Optional[int] = None) -> dict:
    """Defaults <- file <- overrides <- explicit seed; returns the resolved dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["seed"] = seed
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    preset = cfg.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    fields = dict(cfg.get("model", {}))
    fields.setdefault("seed", cfg.get("seed", 0))
    try:
        return PRESETS[preset](**fields)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _build(cls, fields: dict, name: str):
    try:
        return cls(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad {name} config: {exc}") from exc


def optim_config(cfg: dict) -> OptimConfig:
    """Supervised-training optimizer (top-level ``optim`` section)."""
    return _build(OptimConfig, cfg.get("optim", {}), "optim")


def train_config(cfg: dict) -> TrainConfig:
    return _build(TrainConfig, {**cfg.get("train", {}), "seed": cfg.get("seed", 0), "optim": optim_config(cfg)},
                  "train")


def pretrain_config(cfg: dict) -> PretrainConfig:
    mcva = dict(cfg.get("mcva", {}))
    if "block_range" in mcva and mcva["block_range"] is not None:
        mcva["block_range"] = tuple(mcva["block_range"])
    section = dict(cfg.get("pretrain", {}))
    optim = _build(OptimConfig, {**PRETRAIN_OPTIM, **section.pop("optim", {})}, "pretrain.optim")
    return _build(PretrainConfig, {**section, "seed": cfg.get("seed", 0),
                                   "mcva": _build(MCVAConfig, mcva, "mcva"), "optim": optim},
                  "pretrain")
