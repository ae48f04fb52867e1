"""Experiment configuration: nested dataclasses parsed from YAML, strictly validated."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .balancer import DEFAULT_PRIORS
from .heads import DEFAULT_LAMBDAS, FOCAL_GAMMA
from .nn_core import ConfigError
from .synth import RIG_PRESETS, SceneConfig

TASKS = ("obstacle", "freespace", "parking")


@dataclass
class ImageConfig:
    width: int = 128
    height: int = 64


@dataclass
class GridConfig:
    M: int = 72
    N: int = 16
    r_min: float = 2.0
    r_max: float = 50.0


@dataclass
class BackboneSpec:
    kernels: list[int] = field(default_factory=lambda: [3, 3, 3])
    strides: list[int] = field(default_factory=lambda: [2, 2, 2])
    repeats: list[int] = field(default_factory=lambda: [1, 1, 1])
    channels: list[int] = field(default_factory=lambda: [16, 24, 32])
    group_norm: bool = True


@dataclass
class ModelConfig:
    lift: str = "mlp"
    depth_bins: int = 32
    depth_near: float = 1.0
    lift_hidden: int = 128
    lift_channels: int = 32
    bev_channels: int = 32
    bev_layers: int = 3
    head_hidden: int = 32
    backbone: BackboneSpec = field(default_factory=BackboneSpec)


@dataclass
class HeadConfig:
    tasks: list[str] = field(default_factory=lambda: list(TASKS))
    gamma: float = FOCAL_GAMMA
    lambdas: list[float] = field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    log_sigma_init: float = 0.0
    top_k: int = 30
    min_confidence: float = 0.02


@dataclass
class BalancerConfig:
    enabled: bool = True
    priors: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PRIORS))


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    batch_size: int = 8
    lr_decay_epochs: int = 0


@dataclass
class DataConfig:
    path: str | None = None
    seed: int = 0
    size: int = 500
    val_size: int = 100
    scene: dict = field(default_factory=dict)

    def scene_config(self) -> SceneConfig:
        try:
            return SceneConfig(**self.scene)
        except TypeError as exc:
            raise ConfigError(f"data.scene: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"data.scene: {exc}") from None


@dataclass
class ExperimentConfig:
    rig: str = "car2"
    seed: int = 0
    threads: int = 1
    output: str = "runs/default"
    image: ImageConfig = field(default_factory=ImageConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    balancer: BalancerConfig = field(default_factory=BalancerConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "ExperimentConfig":
        if self.rig not in RIG_PRESETS and Path(self.rig).suffix not in (".yaml", ".yml"):
            raise ConfigError(f"rig must be one of {RIG_PRESETS} or a rig YAML file, got {self.rig!r}")
        if self.model.lift not in ("mlp", "ipm"):
            raise ConfigError(f"model.lift must be 'mlp' or 'ipm', got {self.model.lift!r}")
        bad = set(self.heads.tasks) - set(TASKS)
        if bad or not self.heads.tasks:
            raise ConfigError(f"heads.tasks must be a non-empty subset of {TASKS}")
        if len(self.heads.lambdas) != 4:
            raise ConfigError("heads.lambdas needs four values")
        if self.optim.kind not in ("sgd", "adam"):
            raise ConfigError("optim.kind must be 'sgd' or 'adam'")
        for name in ("epochs", "batch_size"):
            if getattr(self.optim, name) < 1:
                raise ConfigError(f"optim.{name} must be >= 1")
        if self.optim.lr <= 0:
            raise ConfigError("optim.lr must be positive")
        if not 0 <= self.data.val_size < self.data.size:
            raise ConfigError("data.val_size must be smaller than data.size")
        if self.grid.M < 4 or self.grid.N < 2 or not 0 < self.grid.r_min < self.grid.r_max:
            raise ConfigError("grid needs M >= 4, N >= 2 and 0 < r_min < r_max")
        if self.image.width % 8 or self.image.height % 8:
            raise ConfigError("image width and height must be multiples of 8")
        for t, c in self.balancer.priors.items():
            if t not in TASKS or c <= 0:
                raise ConfigError(f"balancer prior {t}={c} is invalid")
        self.data.scene_config()
        return self


def _hints(cls):
    return typing.get_type_hints(cls)


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    hints = _hints(cls)
    kw = {}
    for k, v in doc.items():
        t = hints[k]
        path = f"{where}.{k}" if where else k
        if dataclasses.is_dataclass(t):
            kw[k] = _build(t, v, path)
        else:
            kw[k] = _coerce(t, v, path)
    return cls(**kw)


def _coerce(t, v, path):
    origin = typing.get_origin(t)
    if t is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{path}: expected true/false")
        return v
    if t in (int, float):
        if isinstance(v, str):
            # PyYAML reads exponent forms without a dot (1e-3) as strings
            try:
                v = float(v)
            except ValueError:
                raise ConfigError(f"{path}: expected a number") from None
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        if t is int and float(v) != int(v):
            raise ConfigError(f"{path}: expected an integer")
        return t(v)
    if t is str:
        if not isinstance(v, str):
            raise ConfigError(f"{path}: expected a string")
        return v
    if origin is list:
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (inner,) = typing.get_args(t)
        return [_coerce(inner, x, path) for x in v]
    if origin is dict:
        if not isinstance(v, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return dict(v)
    if origin in (typing.Union, types.UnionType):
        if v is None:
            return None
        args = [a for a in typing.get_args(t) if a is not type(None)]
        return _coerce(args[0], v, path)
    return v


def config_from_dict(doc: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, doc or {}, "").validate()


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"override {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.sub=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read YAML (optional), apply ``key.sub=value`` overrides, validate."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    for item in overrides:
        k, v = parse_override(item) if isinstance(item, str) else item
        _set_path(doc, k, v)
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
