"""Experiment configuration (YAML on disk)."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .trainer import METHODS, TrainConfig
from .world import ConfigError, WorldConfig


@dataclass
class TeacherConfig:
    epochs: int = 4
    lr: float = 0.5
    batch_size: int = 256
    emb_dim: int = 32
    hidden: tuple[int, ...] = (256, 128, 64)
    n_requests: int = 200_000
    display: int = 1
    holdout: float = 0.1


@dataclass
class LogsConfig:
    mode: str = "public"
    list_size: int = 10
    n_disp: int = 1


@dataclass
class CascadeConfig:
    m: int = 100
    n_pre: int = 10
    n_disp: int = 1


@dataclass
class EvalConfig:
    n_requests: int = 20_000
    ks: tuple[int, ...] = (5, 10, 20, 50, 100)


DEFAULT_METHODS: dict[str, dict[str, Any]] = {
    "base": {"method": "base", "lr": 0.5},
    "distill": {"method": "distill", "lr": 0.5},
    "rankflow": {"method": "rankflow", "lr": 0.5, "score_weight": 100.0, "select_weight": 0.01},
    # the rank loss is in bid units, so the pair objective wants a smaller step
    "copr_uniform": {"method": "copr", "weighting": "uniform", "lr": 0.06},
    "copr": {"method": "copr", "lr": 0.06},
}


@dataclass
class ExperimentConfig:
    seed: int = 1
    output_dir: str = "runs/default"
    world: WorldConfig = field(default_factory=WorldConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    logs: LogsConfig = field(default_factory=LogsConfig)
    student: dict[str, Any] = field(default_factory=lambda: {"epochs": 6})
    methods: dict[str, dict[str, Any]] = field(default_factory=lambda: copy.deepcopy(DEFAULT_METHODS))
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        c = self.cascade
        if not 1 <= c.n_disp <= c.n_pre <= c.m:
            raise ConfigError("cascade", f"need 1 <= n_disp <= n_pre <= m, got {c.n_disp}, {c.n_pre}, {c.m}")
        if c.m > self.world.n_ads:
            raise ConfigError("cascade.m", f"{c.m} candidates exceed n_ads={self.world.n_ads}")
        if self.logs.mode not in ("public", "production"):
            raise ConfigError("logs.mode", "must be 'public' or 'production'")
        if not 1 <= self.logs.list_size <= self.world.n_ads:
            raise ConfigError("logs.list_size", "must lie in [1, n_ads]")
        if self.logs.mode == "production" and self.logs.list_size > c.m:
            raise ConfigError("logs.list_size", "production logs cannot exceed the candidate count")
        if not 1 <= self.logs.n_disp <= self.logs.list_size:
            raise ConfigError("logs.n_disp", "must lie in [1, list_size]")
        t = self.teacher
        if t.n_requests < 2 or not 0 < t.holdout < 1:
            raise ConfigError("teacher", "need n_requests >= 2 and 0 < holdout < 1")
        if not 1 <= t.display <= self.world.n_ads:
            raise ConfigError("teacher.display", "must lie in [1, n_ads]")
        for key in ("epochs", "batch_size", "emb_dim"):
            if getattr(t, key) < (0 if key == "epochs" else 1):
                raise ConfigError(f"teacher.{key}", "out of range")
        if self.eval.n_requests < 1:
            raise ConfigError("eval.n_requests", "must be >= 1")
        if not self.methods:
            raise ConfigError("methods", "no student methods configured")
        for name in self.methods:
            self.train_config(name)

    def train_config(self, name: str) -> TrainConfig:
        if name not in self.methods:
            raise ConfigError("methods", f"unknown method {name!r}; configured: {', '.join(self.methods)}")
        merged = {**self.student, **self.methods[name]}
        if "method" not in merged:
            if name not in METHODS:
                raise ConfigError(f"methods.{name}.method", "missing training method")
            merged["method"] = name
        try:
            return TrainConfig.from_dict(merged)
        except ConfigError as e:
            raise ConfigError(f"methods.{name}.{e.key}", str(e).split(": ", 1)[-1]) from None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["world"] = self.world.to_dict()
        for k in ("teacher", "eval"):
            for kk, v in d[k].items():
                if isinstance(v, tuple):
                    d[k][kk] = list(v)
        return d

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


_SECTIONS = {"teacher": TeacherConfig, "logs": LogsConfig, "cascade": CascadeConfig, "eval": EvalConfig}


def _build_section(name: str, cls, data: Any):
    if not isinstance(data, Mapping):
        raise ConfigError(name, "must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        want = type(getattr(defaults, key))
        if want is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key}", "must be a list")
            value = tuple(value)
        elif want is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif not isinstance(value, want) or isinstance(value, bool) != (want is bool):
            raise ConfigError(f"{name}.{key}", f"expected {want.__name__}, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("<root>", "config must be a mapping")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(key, "unknown top-level key")
    kwargs: dict[str, Any] = {}
    if "seed" in data:
        if not isinstance(data["seed"], int) or isinstance(data["seed"], bool):
            raise ConfigError("seed", "must be an integer")
        kwargs["seed"] = data["seed"]
    if "output_dir" in data:
        kwargs["output_dir"] = str(data["output_dir"])
    if "world" in data:
        if not isinstance(data["world"], Mapping):
            raise ConfigError("world", "must be a mapping")
        try:
            kwargs["world"] = WorldConfig.from_dict(data["world"])
        except ConfigError as e:
            raise ConfigError(f"world.{e.key}", str(e).split(": ", 1)[-1]) from None
        except TypeError as e:
            raise ConfigError("world", str(e)) from None
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(name, cls, data[name])
    if "student" in data:
        if not isinstance(data["student"], Mapping):
            raise ConfigError("student", "must be a mapping")
        kwargs["student"] = dict(data["student"])
    if "methods" in data:
        if not isinstance(data["methods"], Mapping) or not all(isinstance(v, Mapping) for v in data["methods"].values()):
            raise ConfigError("methods", "must map names to option mappings")
        kwargs["methods"] = {k: dict(v) for k, v in data["methods"].items()}
    return ExperimentConfig(**kwargs)


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` -> (['a', 'b', 'c'], yaml-parsed value)."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(data: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    data = copy.deepcopy(data)
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(path), "cannot descend into a scalar")
        node[path[-1]] = value
    return data


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"not valid YAML ({e})") from None
        if not isinstance(data, dict):
            raise ConfigError(str(path), "config must be a mapping")
    if overrides:
        # overrides patch the effective config, so e.g. one method's option
        # does not replace the whole method table
        data = apply_overrides(config_from_dict(data).to_dict(), overrides)
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
