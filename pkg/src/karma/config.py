"""Run configuration: nested dataclasses loaded from JSON with dotted overrides."""
from __future__ import annotations

import copy
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ConfigError, ModelConfig
from .objective import LossWeights
from .synthgen import DataConfig
from .trainer import DownstreamConfig


@dataclass
class TrainSection:
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 8
    warmup_epochs: float | None = None
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class EvalSection:
    mask_ratio: float | None = None   # None -> the model's training ratio
    seed: int = 0
    test_fraction: float = 0.2        # trailing share of tiles held out of pretraining


@dataclass
class SweepSection:
    m_list: list = field(default_factory=lambda: [2, 4, 8])
    jobs: int = 1


@dataclass
class RunConfig:
    dataset: str | None = None        # directory from `generate`; None -> generate in memory
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    downstream: DownstreamConfig = field(default_factory=DownstreamConfig)
    sweep: SweepSection = field(default_factory=SweepSection)

    def train_config(self):
        from .trainer import TrainConfig
        return TrainConfig(**dataclasses.asdict(self.train), loss=copy.deepcopy(self.loss),
                           model=copy.deepcopy(self.model))


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key '{where}'")
        sub = hints.get(key)
        if dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value, where)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON and falls back to a bare string."""
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override '{text}' is not of the form key=value")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for text in overrides or []:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            child = node.get(k)
            if child is None:
                child = node[k] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override '{text}': '{k}' is not a section")
            node = child
        node[keys[-1]] = value
    return raw


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then overrides; unknown keys are errors."""
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides))
