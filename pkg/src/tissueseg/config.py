"""Configuration dataclasses and the merged run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

MAX_CLASSES = 12
GNN_VARIANTS = ("simple", "attention")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 5
    base_width: int = 8
    node_dim: int = 64
    gnn_layers: int = 2
    gnn_variant: str = "attention"
    tau: float = 0.5
    pool_eps: float = 1e-6
    use_edge_weights: bool = False
    boundary_aware_edges: bool = False
    attention_slope: float = 0.2
    ffn_hidden: int = 128
    blocks_per_stage: int = 2
    dtype: str = "float64"

    def validate(self) -> "ModelConfig":
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2")
        if self.node_dim < 1 or self.gnn_layers < 1 or self.base_width < 1:
            raise ConfigError("model.node_dim, gnn_layers and base_width must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("model.tau must lie in (0, 1)")
        if self.gnn_variant not in GNN_VARIANTS:
            raise ConfigError(f"model.gnn_variant must be one of {GNN_VARIANTS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype must be float64 or float32")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 150
    aux_weight: float = 0.4
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-7
    early_stop_patience: int = 15
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True

    def validate(self) -> "TrainConfig":
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train.lr must be >= 0, batch_size and max_epochs >= 1")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("train patience values must be >= 1")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("train.lr_factor must lie in (0, 1)")
        return self


@dataclass
class SynthConfig:
    num_classes: int = 5
    image_size: int = 64
    seed: int = 1234
    blobs_min: int = 4
    blobs_max: int = 7
    noise_sigma: float = 0.06
    min_region_px: int = 16
    # class c borders classes c-1 and c+1 far more often than others
    adjacency: str = "chain"
    n_train: int = 200
    n_val: int = 40
    n_test: int = 40

    def validate(self) -> "SynthConfig":
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise ConfigError(f"synth.num_classes must lie in [1, {MAX_CLASSES}]")
        if self.image_size < 8 or self.blobs_min < 1 or self.blobs_max < self.blobs_min:
            raise ConfigError("synth.image_size >= 8 and 1 <= blobs_min <= blobs_max required")
        if self.adjacency not in ("chain", "uniform"):
            raise ConfigError("synth.adjacency must be 'chain' or 'uniform'")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split counts must be non-negative")
        return self

    def checksum(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        for key, value in raw.items():
            if key in ("model", "train", "synth"):
                _update(getattr(cfg, key), value, key)
            elif key in ("data_dir", "out_dir"):
                setattr(cfg, key, str(value))
            else:
                raise ConfigError(f"unknown config key '{key}'")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def override(self, dotted: str, value: str) -> None:
        """Apply a ``section.key=value`` override, coercing to the field type."""
        parts = dotted.split(".")
        if len(parts) == 1 and parts[0] in ("data_dir", "out_dir"):
            setattr(self, parts[0], value)
            return
        if len(parts) != 2 or parts[0] not in ("model", "train", "synth"):
            raise ConfigError(f"unknown override key '{dotted}'")
        _update(getattr(self, parts[0]), {parts[1]: value}, parts[0])


def _coerce(kind, value, where: str):
    if isinstance(value, str):
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{where}: expected a boolean, got '{value}'")
            return low in ("true", "1", "yes")
        try:
            return kind(value)
        except ValueError:
            raise ConfigError(f"{where}: cannot parse '{value}' as {kind.__name__}") from None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")
    return value


def _update(section, values: dict[str, Any], name: str) -> None:
    types = {f.name: f.type for f in fields(section)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    for key, value in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        setattr(section, key, _coerce(kinds[types[key]], value, f"{name}.{key}"))
