"""Run configuration: YAML file -> nested dataclasses, with dotted overrides.

Seeds: every subsystem seed is ``derive_seed(seed, name, ...)``, i.e. the
first 32-bit word of ``numpy.random.SeedSequence(seed, spawn_key=crc32(names))``.
A subsystem's stream therefore depends only on the run seed and its own name.
"""

from __future__ import annotations

import copy
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import SYNTHETIC_CLASSES, FEATURE_KINDS
from .model import ModelConfig

STAGE_IDS = ("recon", "recon_kl", "clf_init", "joint")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    manifest: str | None = None
    image_root: str | None = None
    class_names: list[str] = field(default_factory=lambda: list(SYNTHETIC_CLASSES))
    uncertain_policy: str = "to_negative"
    per_class_quota: int | None = None
    split_fractions: list[float] = field(default_factory=lambda: [0.75, 0.125, 0.125])


@dataclass
class SynthConfig:
    n: int = 4000
    image_size: int = 64
    features: list[str] = field(default_factory=lambda: list(FEATURE_KINDS))
    prevalence: list[float] = field(default_factory=lambda: [0.3, 0.3, 0.3])
    cooccurrence: str = "independent"
    noise: float = 0.03


@dataclass
class EpochConfig:
    recon: int = 5
    recon_kl: int = 5
    clf_init: int = 3
    joint: int = 10


@dataclass
class TrainConfig:
    epochs: EpochConfig = field(default_factory=EpochConfig)
    batch_size: int = 64
    vae_lr: float = 1e-4
    clf_lr: float = 1e-2
    kl_weight: float = 1.0
    kl_warmup: bool = False
    checkpoint_select: str = "final"


@dataclass
class EvalConfig:
    split: str = "test"
    threshold_mode: str = "fixed"
    threshold: float = 0.5
    provenance: str = "single run"


@dataclass
class ExplainConfig:
    split: str = "test"
    n_images: int = 50
    steps: int = 8
    scale_min: float = 0.1
    scale_max: float = 10.0
    sigma_range: float = 3.0
    top_fraction: float = 0.05
    separator: int = 1


@dataclass
class Config:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """SHA-256 prefix of the canonical JSON of every setting except the seed."""
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        self.model.validate()
        if self.train.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.train.kl_weight < 0:
            raise ConfigError("train.kl_weight must be >= 0")
        if any(getattr(self.train.epochs, s) < 0 for s in STAGE_IDS):
            raise ConfigError("stage epoch budgets must be >= 0")
        if self.train.checkpoint_select not in ("final", "best"):
            raise ConfigError("train.checkpoint_select must be 'final' or 'best'")
        if self.eval.threshold_mode not in ("fixed", "youden"):
            raise ConfigError("eval.threshold_mode must be 'fixed' or 'youden'")
        for split in (self.eval.split, self.explain.split):
            if split not in ("train", "val", "test"):
                raise ConfigError(f"unknown split {split!r}")
        e = self.explain
        if e.steps < 2 or not 0 < e.scale_min < e.scale_max or not 0 < e.top_fraction < 1:
            raise ConfigError("invalid explain settings")


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(f'{where}{k}' for k in unknown))}")
    defaults = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        default = getattr(defaults, name)
        value = data[name]
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, f"{where}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> Config:
    cfg = _build(Config, data or {}, "")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key.sub=value`` overrides; values are parsed as YAML scalars/lists."""
    out = copy.deepcopy(data)
    reference = Config().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        ref: Any = reference
        for p in parts:
            if not isinstance(ref, dict) or p not in ref:
                raise ConfigError(f"unknown config key {key!r}")
            ref = ref[p]
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return from_dict(apply_overrides(data, overrides or []))


def derive_seed(seed: int, *names: str) -> int:
    key = tuple(zlib.crc32(n.encode()) for n in names)
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1)[0])


def rng_for(seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *names))
