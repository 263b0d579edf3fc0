"""Declarative configuration tree: defaults, profiles, YAML, CLI overrides.

Every knob the CLI and trainer honor lives in one dataclass tree.  Loading
is strict: an unknown key anywhere raises a ConfigError that lists the
valid keys at that level.  Two factory profiles ship: ``paper`` (the
published hyperparameters) and ``desk`` (a small configuration that trains
in minutes on a CPU).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import get_type_hints

import yaml

from .distill import DistillConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossWeights
from .prior import PriorConfig


@dataclass
class TeacherConfig:
    kind: str = "stub"                  # stub | imagenet | clip
    seed: int = 0
    input_size: int = 224
    embed_dim: int = 512
    stage_channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    weights_dir: str | None = None      # clip checkpoint directory
    weights_path: str | None = None     # imagenet state-dict file
    cache_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("stub", "imagenet", "clip"):
            raise ConfigError(f"teacher kind {self.kind!r} not one of stub | imagenet | clip")


@dataclass
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    smooth_l1_beta: float = 1.0
    temperature: float = 100.0
    perceptual_extractor: str = "stub"  # stub | vgg16
    perceptual_layers: tuple[int, ...] = (0, 1, 2)


@dataclass
class DataConfig:
    manifest: str | None = None
    val_manifest: str | None = None
    crop: int = 256
    batch_size: int = 32
    cutmix_prob: float = 0.7
    cutmix_area: tuple[float, float] = (0.1, 0.5)


@dataclass
class TrainConfig:
    epochs: int = 250
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    lr_halve_every: int = 100
    checkpoint_every: int = 50
    out_dir: str = "runs/default"


@dataclass
class DecoderSettings:
    widths: tuple[int, ...] | None = None   # None: derived from encoder channels
    predict_residual: bool = False


@dataclass
class Config:
    seed: int = 0
    device: str = "cpu"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        ).hexdigest()[:16]


def _coerce(value, reference):
    """YAML gives lists; dataclass defaults use tuples."""
    if isinstance(reference, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build_dataclass(dc_type, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping, got {type(data).__name__}")
    hints = get_type_hints(dc_type)
    valid = {f.name for f in fields(dc_type)}
    unknown = sorted(set(data) - valid)
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {unknown} under '{path}'; valid keys: {sorted(valid)}"
        )
    defaults = dc_type()
    kwargs = {}
    for f in fields(dc_type):
        if f.name not in data:
            continue
        value = data[f.name]
        hint = hints.get(f.name)
        if is_dataclass(hint):
            kwargs[f.name] = _build_dataclass(hint, value, f"{path}.{f.name}")
        else:
            kwargs[f.name] = _coerce(value, getattr(defaults, f.name))
    try:
        return dc_type(**kwargs)
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"invalid value under '{path}': {exc}") from exc


def config_from_dict(data: dict) -> Config:
    return _build_dataclass(Config, data or {})


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config mapping."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into scalar at {key!r} for {item!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return data


def load_config(path=None, overrides: list[str] | None = None, profile: str = "paper") -> Config:
    """Build a Config from a profile, an optional YAML file, and overrides."""
    base = profile_dict(profile)
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        base = _deep_merge(base, loaded)
    if overrides:
        base = apply_overrides(base, overrides)
    return config_from_dict(base)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def profile_dict(name: str) -> dict:
    if name == "paper":
        return {}
    if name == "desk":
        return {
            "encoder": {"channels": [16, 32, 64, 128], "blocks": [2, 2, 2, 1]},
            "prior": {"num_tokens": 8},
            "decoder": {"predict_residual": True},
            "teacher": {"input_size": 64},
            "loss": {"perceptual_extractor": "stub"},
            "data": {"crop": 64, "batch_size": 8},
            "train": {"epochs": 30, "lr": 1e-3, "lr_halve_every": 100},
        }
    raise ConfigError(f"unknown profile {name!r}, expected paper | desk")


def paper_config() -> Config:
    return load_config(profile="paper")


def desk_config() -> Config:
    return load_config(profile="desk")
