"""Run configuration: a YAML tree merged over built-in defaults, with
``dotted.key=value`` overrides. Unknown keys are rejected."""

from __future__ import annotations

import copy
import hashlib
import json
import re
from pathlib import Path
from typing import Any, Iterable

import yaml

from fmri2text.numerics import ValidationError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dtype": "float32",
    "data": {
        "path": None,
        "n_subjects": 4,
        "n_target_subjects": 1,
        "samples_per_subject": 256,
        "n_classes": 8,
        "grid": [16, 16, 16],
        "frames_T": 4,
        "video_frames": 4,
        "video_size": 32,
        "video_channels": 3,
        "noise": 0.1,
        "stimulus_jitter": 0.5,
        "nuisance": 3.0,
        "video_noise": 0.05,
        "target_adaptation_fraction": 0.5,
        "source_holdout_fraction": 0.2,
    },
    "tokenizer": {"kernel": [4, 4, 4], "stride": [4, 4, 4], "out_channels": 64},
    "encoders": {
        "width": 128, "heads": 4, "mlp_ratio": 2.0,
        "fmri_depth": 4, "video_depth": 4, "qformer_depth": 2,
        "n_queries": 32, "patch": 8,
    },
    "adaptors": {
        "modules": ["fmri_encoder", "qformer"],
        "sites": ["query-proj", "mlp"],
        "rank": None,
        "scale": 1.0,
        "activation": "gelu",
        "projection_hidden": 64,
    },
    "decoder": {"width": 128, "depth": 4, "heads": 4, "mlp_ratio": 2.0, "max_len": 80, "max_new_tokens": 24},
    "pretrain": {
        "mae_steps": 300, "mask_ratio": 0.75, "video_warmup_steps": 200, "decoder_steps": 600,
        "batch_size": 32, "lr": 1e-3,
    },
    "stage1": {
        "steps": 1000, "batch_size": 16,
        "tau_clip": 0.05, "learn_tau": True, "tau_min": 0.01, "tau_max": 0.5,
        "alpha": 0.5, "beta": 0.5,
        "lr_adaptor": 1e-3, "lr_tokenizer": 1e-4,
    },
    "stage2": {
        "steps": 1000, "batch_size": 16, "lambda": 0.5, "lr": 1e-3,
        "caption_mode": "template", "max_caption_failure_rate": 0.1, "failure_window": 50,
    },
    "da": {"tau_nc": 0.5, "rho": None, "margin": 0.1, "head_temperature": 0.05},
    "optim": {"weight_decay": 0.01, "checkpoint_every": 500},
    "eval": {"retrieval_batch": 16},
}


class ConfigError(ValidationError):
    pass


_NUMBER = re.compile(r"^[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?$")


def _coerce(default: Any, value: Any) -> Any:
    # YAML 1.1 reads "3e-4" as a string; numeric fields take it as a float
    if isinstance(value, str) and not isinstance(default, (bool, str)) and _NUMBER.match(value.strip()):
        return float(value)
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {path}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path} must be a mapping")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = _coerce(base[key], copy.deepcopy(value))
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        path, value = parse_override(text)
        node = cfg
        for i, part in enumerate(path):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {'.'.join(path[: i + 1])}")
            if i == len(path) - 1:
                if isinstance(node[part], dict):
                    raise ConfigError(f"cannot override section {'.'.join(path)} with a scalar")
                node[part] = _coerce(node[part], value)
            else:
                node = node[part]
    return cfg


def load_config(source: str | Path | dict | None = "default", overrides: Iterable[str] = ()) -> dict:
    """Resolve ``source`` (``"default"``, a YAML path, or a mapping) plus overrides."""
    if source is None or source == "default":
        user: dict = {}
    elif isinstance(source, dict):
        user = source
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        user = yaml.safe_load(path.read_text()) or {}
        if not isinstance(user, dict):
            raise ConfigError(f"{path} does not hold a mapping")
    cfg = apply_overrides(_merge(DEFAULTS, user), overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError("dtype must be float32 or float64")
    for sec, key in (("stage1", "alpha"), ("stage1", "beta"), ("stage2", "lambda")):
        v = cfg[sec][key]
        if not isinstance(v, (int, float)) or not 0 <= v <= 1:
            raise ConfigError(f"{sec}.{key} must lie in [0, 1]")
    if cfg["stage1"]["batch_size"] < 2 or cfg["stage2"]["batch_size"] < 2:
        raise ConfigError("batch sizes must be >= 2")


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
