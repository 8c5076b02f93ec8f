"""Run configuration: nested dataclasses loaded from YAML with env-var overrides.

Every key can be overridden with an environment variable
``GDATPRED_<SECTION>__<KEY>=<yaml value>``, e.g. ``GDATPRED_TRAIN__EPOCHS=5``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

ENV_PREFIX = "GDATPRED_"

MODES = ("T", "T+C", "T+C-noattn", "T+C-kin")


@dataclass
class DataConfig:
    path: str | None = None
    descriptor: dict = field(default_factory=dict)
    synthetic: dict | None = None  # SyntheticScenarioSpec fields; used when path is None
    history_len: int = 4
    future_len: int = 10
    stride: int = 1
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    cell_size: float = 1.0
    grid_margin: float = 10.0

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be three nonnegative numbers summing to 1, got {self.split}")


@dataclass
class ModelConfig:
    mode: str = "T+C-kin"
    state_hidden: int = 64
    relation_hidden: int = 64
    relation_dim: int = 16
    node_dim: int = 64
    context_channels: int = 16
    context_layers: int = 5
    context_kernel: int = 5
    patch_size: int = 31
    interpolation: str = "nearest"
    topo_heads: int = 4
    rounds: int = 2
    temporal_heads: int = 2
    init_lambda: float = 1.0
    init_mu: float = 1.0
    latent_dim: int = 32
    encoder_hidden: int = 128
    decoder_hidden: int = 128
    distance_threshold: float = 30.0
    accel_bound: float = 4.0
    slip_rate_bound: float = 0.6
    rear_length: float = 1.5
    substeps: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.node_dim % self.topo_heads:
            raise ValueError("topological heads must divide the node width")
        if self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd")

    @property
    def use_context(self) -> bool:
        return self.mode != "T"

    @property
    def uniform_attention(self) -> bool:
        return self.mode == "T+C-noattn"

    @property
    def kinematic(self) -> bool:
        return self.mode == "T+C-kin"


@dataclass
class LossConfig:
    gamma: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    kernel: str = "imq"
    scale: float | None = None
    squared: bool = True


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    learning_rate: float = 1e-3
    grad_clip: float | None = None
    seed: int = 0
    val_k: int = 5


@dataclass
class EvalConfig:
    k: int = 20
    horizons: list[int] | None = None  # default: every 2 steps up to the future length


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["data"]["split"] = list(d["data"]["split"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any] | None) -> "Config":
        d = dict(d or {})
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(sections)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, klass in (("data", DataConfig), ("model", ModelConfig), ("loss", LossConfig),
                            ("train", TrainConfig), ("eval", EvalConfig)):
            sub = dict(d.get(name) or {})
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - known
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**sub)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None = None, env: Mapping[str, str] | None = None) -> "Config":
        raw: dict = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        return cls.from_dict(apply_env_overrides(raw, os.environ if env is None else env))

    def replace(self, **sections: Mapping[str, Any]) -> "Config":
        d = self.to_dict()
        for name, updates in sections.items():
            d[name].update(updates)
        return Config.from_dict(d)

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)


def apply_env_overrides(raw: Mapping[str, Any], env: Mapping[str, str]) -> dict:
    out = {k: dict(v or {}) if isinstance(v, Mapping) else v for k, v in raw.items()}
    for key, value in sorted(env.items()):
        if not key.startswith(ENV_PREFIX) or "__" not in key:
            continue
        section, name = key[len(ENV_PREFIX):].lower().split("__", 1)
        out.setdefault(section, {})[name] = yaml.safe_load(value)
    return out
