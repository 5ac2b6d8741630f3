"""Run configuration: defaults, YAML loading, validation, and the content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .container import canonical_json

VARIANTS = ("full", "monolithic", "single_small", "uniform_agg", "homogeneous")
FORMATS = ("dataset", "foursquare", "gowalla")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    path: str = ""
    format: str = "dataset"
    name: str = "dataset"
    min_user: int = 10
    min_poi: int = 10


@dataclass
class ModelConfig:
    d_e: int = 128
    K: int = 4
    d_s: int = 32
    d_slot: int = 8
    n_slot: int = 48
    d_dist: int = 8
    d_spatial: int = 16
    bucket_edges: list[float] = field(
        default_factory=lambda: [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0])
    tau_t: float = 86400.0
    tau_d: float = 10.0
    temperature: float = 1.0
    decay_init: float = 0.5
    decay_stagger: float = 0.25
    variant: str = "full"

    @property
    def n_bucket(self) -> int:
        return len(self.bucket_edges) + 1

    @property
    def d(self) -> int:
        return self.K * self.d_s

    @property
    def d_time(self) -> int:
        return 4 + self.d_slot

    @property
    def d_context(self) -> int:
        return self.d_time + self.d_spatial

    @property
    def d_x(self) -> int:
        return self.d_e + self.d_context


@dataclass
class ObjectiveConfig:
    n_neg: int = 100
    epsilon: float = 0.1
    k_hard: int = 10
    margin: float = 0.5
    beta: float = 0.1
    sampler: str = "uniform"


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 256
    dropout: float = 0.2
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    patience: int = 10  # 0 disables early stopping
    max_seq_len: int = 200
    # Non-protocol speed option: rank against this many sampled POIs during validation.
    val_sampled: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    deterministic: bool = True

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Copy with individual fields overridden, e.g. ``replace(model={"K": 1})``."""
        raw = self.to_dict()
        for section, values in sections.items():
            if isinstance(values, dict):
                raw[section].update(values)
            else:
                raw[section] = values
        return from_dict(raw)

    def hash(self) -> str:
        return config_hash(self)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "objective": ObjectiveConfig,
    "optim": OptimConfig,
}
# Fields that locate inputs or choose run bookkeeping rather than define the model.
_UNHASHED = {("data", "path"), ("seeds",), ("deterministic",)}


def _build_section(name: str, cls, values) -> Any:
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
        default = known[key].default
        if default is dataclasses.MISSING:
            default = known[key].default_factory()
        kwargs[key] = _coerce(f"{name}.{key}", value, default)
    return cls(**kwargs)


def _coerce(where: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - set(_SECTIONS) - {"seeds", "deterministic"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown section")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    seeds = raw.get("seeds", [0, 1, 2, 3, 4])
    if not isinstance(seeds, list) or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"seeds: expected a list of integers, got {seeds!r}")
    deterministic = raw.get("deterministic", True)
    if not isinstance(deterministic, bool):
        raise ConfigError(f"deterministic: expected true/false, got {deterministic!r}")
    cfg = RunConfig(seeds=list(seeds), deterministic=deterministic, **sections)
    cfg.model.bucket_edges = [float(e) for e in cfg.model.bucket_edges]
    validate(cfg)
    return cfg


def load(path: str | Path) -> RunConfig:
    """Load a YAML (or JSON) config; relative data paths resolve against the file."""
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = from_dict(raw)
    if cfg.data.path and not Path(cfg.data.path).is_absolute():
        cfg.data.path = str((path.parent / cfg.data.path).resolve())
    return cfg


def dump(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)


def validate(cfg: RunConfig) -> None:
    m, o, p, d = cfg.model, cfg.objective, cfg.optim, cfg.data

    def need(cond: bool, where: str, msg: str) -> None:
        if not cond:
            raise ConfigError(f"{where}: {msg}")

    need(d.format in FORMATS, "data.format", f"must be one of {FORMATS}")
    need(d.min_user >= 1, "data.min_user", "must be >= 1")
    need(d.min_poi >= 1, "data.min_poi", "must be >= 1")
    for name in ("d_e", "K", "d_s", "d_slot", "d_dist", "d_spatial"):
        need(getattr(m, name) >= 1, f"model.{name}", "must be >= 1")
    need(m.n_slot == 48, "model.n_slot", "slot layout is hour x weekend, so exactly 48")
    edges = m.bucket_edges
    need(len(edges) >= 1 and all(e > 0 and math.isfinite(e) for e in edges),
         "model.bucket_edges", "must be positive finite numbers")
    need(all(a < b for a, b in zip(edges, edges[1:])), "model.bucket_edges", "must be strictly increasing")
    for name in ("tau_t", "tau_d", "temperature"):
        need(getattr(m, name) > 0, f"model.{name}", "must be > 0")
    need(m.decay_init > 0, "model.decay_init", "must be > 0")
    need(m.decay_stagger >= 0, "model.decay_stagger", "must be >= 0")
    need(m.variant in VARIANTS, "model.variant", f"must be one of {VARIANTS}")
    need(o.n_neg >= 1, "objective.n_neg", "must be >= 1")
    need(0.0 <= o.epsilon < 1.0, "objective.epsilon", "must satisfy 0 <= epsilon < 1")
    need(1 <= o.k_hard <= o.n_neg, "objective.k_hard", "must satisfy 1 <= k_hard <= n_neg")
    need(o.margin >= 0, "objective.margin", "must be >= 0")
    need(o.beta >= 0, "objective.beta", "must be >= 0")
    need(o.sampler == "uniform", "objective.sampler", "only 'uniform' is implemented")
    need(p.lr > 0, "optim.lr", "must be > 0")
    need(p.batch_size >= 1, "optim.batch_size", "must be >= 1")
    need(0.0 <= p.dropout < 1.0, "optim.dropout", "must satisfy 0 <= dropout < 1")
    need(p.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    need(0 <= p.beta1 < 1 and 0 <= p.beta2 < 1, "optim.beta1/beta2", "must lie in [0, 1)")
    need(p.eps > 0, "optim.eps", "must be > 0")
    need(p.epochs >= 1, "optim.epochs", "must be >= 1")
    need(p.patience >= 0, "optim.patience", "must be >= 0")
    need(p.max_seq_len >= 2, "optim.max_seq_len", "must be >= 2")
    need(p.val_sampled >= 0, "optim.val_sampled", "must be >= 0")


def config_hash(cfg: RunConfig) -> str:
    raw = cfg.to_dict()
    for key in _UNHASHED:
        node = raw
        for part in key[:-1]:
            node = node[part]
        node.pop(key[-1], None)
    return hashlib.sha256(canonical_json(raw)).hexdigest()[:16]


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Return the config for one ablation variant of ``cfg`` (which describes the full model)."""
    if variant not in VARIANTS:
        raise ConfigError(f"model.variant: unknown variant {variant!r}; choose from {VARIANTS}")
    m = cfg.model
    if variant == "monolithic":
        return cfg.replace(model={"K": 1, "d_s": m.K * m.d_s, "variant": variant})
    if variant == "single_small":
        return cfg.replace(model={"K": 1, "d_s": m.d_s, "variant": variant})
    return cfg.replace(model={"variant": variant})
