"""Experiment configuration: YAML in, validated dataclasses out.

The file is a nested mapping whose top-level sections mirror the
dataclasses below. Missing keys take their defaults, unknown keys are
errors, and every problem is reported at once. Command-line overrides use
dotted paths (``schedule.T_FIM=10``) and YAML scalar syntax for values.
"""
from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .allocation import CapabilityProfile, ScheduleConfig
from .data import PartitionSpec
from .errors import ConfigError
from .model import ModelConfig

OUTPUT_ENV = "FEDLORA_SIM_OUTPUT"


@dataclass(frozen=True)
class FederationConfig:
    n: int = 100
    s: int = 10
    T: int = 500
    tau: int = 1
    batch_size: int = 32
    max_steps: int | None = None  # cap on local steps per round; None = full epochs
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    eval_every: int = 1
    checkpoint_every: int = 0  # save global adapters every K rounds; 0 disables

    def problems(self) -> list[str]:
        out = []
        if self.n < 1:
            out.append("federation.n must be >= 1")
        if not 1 <= self.s <= max(self.n, 1):
            out.append("federation.s must satisfy 1 <= s <= n")
        if self.T < 0:
            out.append("federation.T must be >= 0")
        if self.tau < 1:
            out.append("federation.tau must be >= 1")
        if self.batch_size < 1:
            out.append("federation.batch_size must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            out.append("federation.max_steps must be >= 0")
        if self.lr <= 0:
            out.append("federation.lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("federation.beta1/beta2 must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            out.append("federation.eps must be > 0 and weight_decay >= 0")
        if self.eval_every < 1:
            out.append("federation.eval_every must be >= 1")
        if self.checkpoint_every < 0:
            out.append("federation.checkpoint_every must be >= 0")
        return out


@dataclass(frozen=True)
class CapabilityConfig:
    fractions: tuple[float, ...] = (0.5, 0.75, 1.0)
    ratios: tuple[float, ...] = (0.6, 0.3, 0.1)
    levels: tuple[int, ...] | None = None  # explicit layer counts; overrides fractions

    def profile(self, l: int) -> CapabilityProfile:
        total = sum(self.ratios)
        ratios = tuple(r / total for r in self.ratios) if total > 0 else tuple(self.ratios)
        if self.levels is not None:
            levels = tuple(self.levels)
        else:
            levels = tuple(max(1, min(l, math.ceil(f * l - 1e-9))) for f in self.fractions)
        return CapabilityProfile(levels, ratios)

    def problems(self, l: int) -> list[str]:
        if self.levels is None and any(not 0 < f <= 1 for f in self.fractions):
            return ["capability.fractions must lie in (0, 1]"]
        if any(r <= 0 for r in self.ratios):
            return ["capability.ratios must be positive"]
        return self.profile(l).problems(l)


@dataclass(frozen=True)
class PartitionConfig:
    mode: str = "IID"
    classes_per_client: int = 2
    dirichlet_alpha: float = 1.0

    def spec(self, n_clients: int) -> PartitionSpec:
        return PartitionSpec(self.mode, self.classes_per_client, self.dirichlet_alpha, n_clients)


@dataclass(frozen=True)
class ProxyConfig:
    size: int = 100


@dataclass(frozen=True)
class DataConfig:
    kind: str = "tokens"
    n_train: int = 5000
    n_test: int = 1000
    separation: float = 2.0
    motif_len: int = 3
    noise: float = 1.0

    def problems(self) -> list[str]:
        out = []
        if self.kind not in ("tokens", "gaussian"):
            out.append("data.kind must be tokens or gaussian")
        if self.n_train < 1 or self.n_test < 2:
            out.append("data.n_train must be >= 1 and data.n_test >= 2")
        if self.separation <= 0 or self.noise <= 0:
            out.append("data.separation and data.noise must be > 0")
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    capability: CapabilityConfig = field(default_factory=CapabilityConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "runs"

    @property
    def profile(self) -> CapabilityProfile:
        return self.capability.profile(self.model.l)

    @property
    def partition_spec(self) -> PartitionSpec:
        return self.partition.spec(self.federation.n)

    def problems(self) -> list[str]:
        out = []
        out += self.model.problems()
        out += self.federation.problems()
        out += self.schedule.problems()
        if self.model.l >= 1:
            out += self.capability.problems(self.model.l)
        out += self.partition_spec.problems(self.model.n_classes)
        out += self.data.problems()
        if not 1 <= self.proxy.size < self.data.n_test:
            out.append("proxy.size must satisfy 1 <= size < data.n_test")
        if self.data.n_train < self.federation.n:
            out.append("data.n_train must be >= federation.n")
        if not self.seeds:
            out.append("seeds must be non-empty")
        elif any(int(s) < 0 for s in self.seeds):
            out.append("seeds must be non-negative")
        if self.data.kind == "tokens" and self.model.continuous:
            out.append("model.continuous must be false for the tokens task")
        if self.data.kind == "gaussian" and not self.model.continuous:
            out.append("model.continuous must be true for the gaussian task")
        return out

    def validate(self) -> "ExperimentConfig":
        bad = self.problems()
        if bad:
            raise ConfigError(bad)
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        tree = to_dict(self)
        for dotted, value in overrides.items():
            node = tree
            parts = dotted.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError([f"unknown config key {dotted!r}"])
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError([f"unknown config key {dotted!r}"])
            node[parts[-1]] = value
        return from_dict(tree)


_SECTIONS = {
    "model": ModelConfig,
    "federation": FederationConfig,
    "schedule": ScheduleConfig,
    "capability": CapabilityConfig,
    "partition": PartitionConfig,
    "proxy": ProxyConfig,
    "data": DataConfig,
}


def _coerce(value, default, key, problems):
    """Convert a YAML scalar/list to the type implied by the field default."""
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int) or (default is None and isinstance(value, int)):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise TypeError
            return value
        if isinstance(default, tuple) or default is None:
            if not isinstance(value, (list, tuple)):
                raise TypeError
            kind = type(default[0]) if default else type(value[0]) if value else float
            return tuple(kind(v) for v in value)
    except (TypeError, ValueError):
        problems.append(f"{key}: invalid value {value!r}")
        return default
    return value


def from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    problems: list[str] = []
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, None) or {}
        if not isinstance(section, dict):
            problems.append(f"{name}: expected a mapping")
            continue
        defaults = cls()
        known = {f.name for f in fields(cls)}
        for key in section:
            if key not in known:
                problems.append(f"unknown config key '{name}.{key}'")
        vals = {
            k: _coerce(section[k], getattr(defaults, k), f"{name}.{k}", problems)
            for k in section
            if k in known
        }
        kwargs[name] = cls(**vals)
    if "seeds" in raw:
        seeds = raw.pop("seeds")
        if isinstance(seeds, int):
            seeds = [seeds]
        kwargs["seeds"] = _coerce(seeds, (0,), "seeds", problems)
    if "output_dir" in raw:
        kwargs["output_dir"] = _coerce(raw.pop("output_dir"), "runs", "output_dir", problems)
    for key in raw:
        problems.append(f"unknown config key '{key}'")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs)


def to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {}
    for name in _SECTIONS:
        obj = getattr(cfg, name)
        out[name] = {f.name: plain(getattr(obj, f.name)) for f in fields(obj)}
    out["seeds"] = list(cfg.seeds)
    out["output_dir"] = cfg.output_dir
    return out


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse_overrides(items) -> dict:
    """``["a.b=1", "c.d=x"]`` -> ``{"a.b": 1, "c.d": "x"}``."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r} must look like key=value"])
        key, text = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(text) if text.strip() else None
    return out


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read, apply overrides, validate. Raises ConfigError listing every problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"config file {path} does not exist"])
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    cfg = from_dict(raw)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    env_root = os.environ.get(OUTPUT_ENV)
    if env_root:
        cfg = cfg.replace(output_dir=env_root)
    return cfg.validate()
