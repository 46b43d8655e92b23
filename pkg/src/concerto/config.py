"""Run-configuration files: JSON mirroring the training, augmentation,
encoder, and clustering configs, with full-schema validation and an explicit
``unverified_defaults`` block naming every default that is a judgment call
rather than a pinned requirement.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .encoder import EncoderConfig
from .objectives import ClusterLossConfig, LossWeights
from .trainer import TrainConfig
from .views import AugmentConfig


class ConfigError(ValueError):
    pass


UNVERIFIED_DEFAULTS = {
    "cluster.student_temp": 0.1,
    "cluster.teacher_temp": 0.04,
    "cluster.center_momentum": 0.9,
    "encoder.proto_count": 1024,
    "encoder.proj_dim": 256,
    "augment.mask_ratio": 0.3,
    "augment.mask_grid": 0.1,
    "augment.crop_range": [0.1, 0.4],
    "augment.scale_range": [0.9, 1.1],
    "augment.flip_prob": 0.5,
    "train.lr_depth_decay": 0.9,
    "train.warmup_fraction": 0.1,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.weight_decay": 0.05,
}


@dataclass
class RunConfig:
    train: TrainConfig
    augment: AugmentConfig
    encoder: EncoderConfig
    cluster: ClusterLossConfig

    def to_dict(self) -> dict:
        doc = {"train": asdict(self.train), "augment": asdict(self.augment),
               "encoder": asdict(self.encoder), "cluster": asdict(self.cluster),
               "unverified_defaults": UNVERIFIED_DEFAULTS}
        return doc


def _build(cls, section: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}' section: {sorted(unknown)}")
    tuple_fields = {f.name for f in fields(cls) if "Tuple" in str(f.type) or "tuple" in str(f.type)}
    coerced = {k: tuple(v) if k in tuple_fields and isinstance(v, list) else v
               for k, v in section.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from e


def default_run_config() -> RunConfig:
    return RunConfig(train=TrainConfig(), augment=AugmentConfig(),
                     encoder=EncoderConfig(), cluster=ClusterLossConfig())


def parse_run_config(doc: dict) -> RunConfig:
    known_sections = {"train", "augment", "encoder", "cluster", "unverified_defaults"}
    unknown = set(doc) - known_sections
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    train_section = dict(doc.get("train", {}))
    weights = train_section.pop("weights", None)
    train = _build(TrainConfig, train_section, "train")
    if weights is not None:
        if set(weights) - {"cross", "intra"}:
            raise ConfigError(f"unknown loss weight keys: {sorted(set(weights) - {'cross', 'intra'})}")
        train.weights = LossWeights(**weights)
    return RunConfig(
        train=train,
        augment=_build(AugmentConfig, doc.get("augment", {}), "augment"),
        encoder=_build(EncoderConfig, doc.get("encoder", {}), "encoder"),
        cluster=_build(ClusterLossConfig, doc.get("cluster", {}), "cluster"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON ({path}): {e}") from e
    return parse_run_config(doc)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
