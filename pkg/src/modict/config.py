"""Run configuration: YAML sections mapped onto dataclasses, unknown keys rejected."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .decoding import GenConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class ModelSection:
    arch: str = "decoder-only"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 512
    visual_prefix_len: int = 5
    prompt_len: int = 10

    def to_model_config(self, vocab_size: int, image_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, image_dim=image_dim, **asdict(self))


@dataclass
class TrainSection:
    lr_peak: float = 1e-4
    warmup_steps: int = 1000
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "adamw"
    betas: list[float] = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    max_steps: Optional[int] = None

    def to_train_config(self, seed: int) -> TrainConfig:
        d = asdict(self)
        d.pop("max_steps")
        return TrainConfig(seed=seed, **d)


@dataclass
class GenSection:
    beam: int = 4
    samples: int = 20
    max_new_tokens: int = 96
    temperature: float = 1.0
    batch_size: int = 10

    def to_gen_config(self, seed: int) -> GenConfig:
        d = asdict(self)
        d.pop("batch_size")
        return GenConfig(seed=seed, **d)


@dataclass
class CorpusSection:
    n_samples: int = 1000
    category: str = "cases_bags"
    image_dim: int = 32
    dev_frac: float = 0.05
    test_frac: float = 0.05
    raw: Optional[str] = None
    dictionaries: Optional[str] = None


@dataclass
class RunConfig:
    seed: int = 0
    freeze_plan: str = "decoder-only-adapter"
    shots: int = 1
    with_adapter: Optional[bool] = None
    encoder: str = "precomputed"
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    gen: GenSection = field(default_factory=GenSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelSection, "train": TrainSection, "gen": GenSection, "corpus": CorpusSection}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config key(s) in {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS and cls is RunConfig:
            kwargs[k] = _build(_SECTIONS[k], v or {}, k)
        else:
            kwargs[k] = v
    return cls(**kwargs)


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``section.key=value`` strings; values are parsed as YAML scalars."""
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {item!r} descends into a non-section")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path: Optional[str | Path] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        data = loaded or {}
    data = apply_overrides(data, overrides or [])
    return _build(RunConfig, data, "")


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")
