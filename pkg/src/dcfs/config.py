"""Structured run configuration: YAML file + dotted-path overrides.

Unknown keys are rejected; every method hyperparameter has a default so a
minimal config only names the output directory and checkpoint path.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .engine import EngineConfig
from .errors import ConfigurationError
from .scl import AugmentPolicy
from .streams import BENCHMARK_CORRUPTIONS, SYNTHETIC_CORRUPTIONS


def _from_mapping(cls, mapping: dict | None, where: str):
    mapping = dict(mapping or {})
    known = {f.name for f in fields(cls)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigurationError(
            f"unknown config key(s) under {where}: {sorted(unknown)}")
    return cls(**mapping)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"            # synthetic | files
    num_classes: int = 10
    image_size: int = 32
    train_samples: int = 4000
    data_seed: int = 100
    stream_seed: int | None = None     # defaults to data_seed + 1
    samples_per_domain: int = 1000
    corruptions: list[str] | None = None  # default: full set for the kind
    severity: int = 5
    root: str | None = None            # files mode

    def __post_init__(self):
        if self.kind not in ("synthetic", "files"):
            raise ConfigurationError(f"dataset.kind must be synthetic|files, got {self.kind!r}")
        if self.kind == "files" and not self.root:
            raise ConfigurationError("dataset.root is required when dataset.kind=files")
        if self.stream_seed is None:
            self.stream_seed = self.data_seed + 1
        if self.corruptions is None:
            self.corruptions = list(BENCHMARK_CORRUPTIONS if self.kind == "files"
                                    else SYNTHETIC_CORRUPTIONS)


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    checkpoint: str = ""
    widen_factor: int = 10


@dataclass
class PretrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 128


@dataclass
class MethodConfig:
    strategy: str = "dcfs"
    lambda_cdm: float = 1.0
    lambda_scl: float = 1.0
    mixup_alpha: float = 1.0
    cdm_reg_weight: float = 0.1
    ema_momentum: float = 0.999
    attention_reduction: int = 8
    max_weight: float = 1.0
    enable_mixup: bool = True
    symmetric_consistency: bool = False
    hard_pseudo_labels: bool = False
    per_batch_class_mean: bool = False
    save_final_state: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = _from_mapping(AugmentPolicy, self.augment, "method.augment")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    batch_size: int = 200


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def require(self, *keys: str) -> None:
        lookup = {"output_dir": self.output_dir, "model.checkpoint": self.model.checkpoint}
        for key in keys:
            if not lookup[key]:
                raise ConfigurationError(f"missing required config key: {key}")

    def engine_config(self) -> EngineConfig:
        m = self.method
        return EngineConfig(
            strategy=m.strategy, lambda_cdm=m.lambda_cdm, lambda_scl=m.lambda_scl,
            optimizer=self.optimizer.kind, lr=self.optimizer.lr,
            batch_size=self.optimizer.batch_size, seed=self.seed,
            mixup_alpha=m.mixup_alpha, cdm_reg_weight=m.cdm_reg_weight,
            ema_momentum=m.ema_momentum, attention_reduction=m.attention_reduction,
            max_weight=m.max_weight, enable_mixup=m.enable_mixup,
            symmetric_consistency=m.symmetric_consistency,
            hard_pseudo_labels=m.hard_pseudo_labels,
            per_batch_class_mean=m.per_batch_class_mean,
            save_final_state=m.save_final_state, augment=m.augment)


def apply_overrides(mapping: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` overrides; values are parsed as YAML scalars."""
    result = copy.deepcopy(mapping)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override through scalar at {part!r} in {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return result


def config_from_mapping(mapping: dict) -> RunConfig:
    mapping = dict(mapping or {})
    sections = {"dataset": DatasetConfig, "model": ModelConfig,
                "pretrain": PretrainConfig, "method": MethodConfig,
                "optimizer": OptimizerConfig}
    parsed: dict[str, Any] = {}
    for name, cls in sections.items():
        parsed[name] = _from_mapping(cls, mapping.pop(name, None), name)
    known = {"seed", "output_dir"}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level config key(s): {sorted(unknown)}")
    return RunConfig(seed=int(mapping.get("seed", 0)),
                     output_dir=str(mapping.get("output_dir", "")), **parsed)


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    text = Path(path).read_text()
    mapping = yaml.safe_load(text) or {}
    if not isinstance(mapping, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(mapping).__name__}")
    if overrides:
        mapping = apply_overrides(mapping, overrides)
    return config_from_mapping(mapping)
