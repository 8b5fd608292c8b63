"""JSON run configuration with strict keys and filled-in defaults."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import ImageDataset, load_cifar10, synthetic_dataset
from .errors import ConfigError
from .task import TaskConfig
from .train import TrainConfig
from .vit import ViTConfig


@dataclass
class DataConfig:
    source: str = "synthetic"          # "synthetic" | "cifar10"
    train_path: list = field(default_factory=list)
    eval_path: list = field(default_factory=list)
    n_train: int = 8192
    n_eval: int = 1024
    seed: int = 0
    eval_seed: int = 1
    labels: bool = False
    augment: bool = False
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.5, 0.5, 0.5])

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"data.source must be 'synthetic' or 'cifar10', got {self.source!r}")
        if self.source == "cifar10" and not self.train_path:
            raise ConfigError("data.train_path is required for cifar10")
        if isinstance(self.train_path, str):
            self.train_path = [self.train_path]
        if isinstance(self.eval_path, str):
            self.eval_path = [self.eval_path]
        if min(self.std) <= 0:
            raise ConfigError("data.std entries must be positive")


@dataclass
class TrainSection:
    base_lr: float = 4e-3
    batch_size: int = 64
    epochs: int = 20
    warmup_epochs: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    checkpoint_every: int = 0


@dataclass
class EvalConfig:
    seed: int = 0
    n_images: int = 1024
    gammas: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75])
    gamma_pos: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 0.95])
    probe_epochs: int = 20
    probe_pe_mask_ratio: float = 0.75
    probe_gamma: float = 0.0
    probe_train_images: int = 2048


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(base_lr=t.base_lr, batch_size=t.batch_size, epochs=t.epochs,
                           warmup_epochs=t.warmup_epochs, weight_decay=t.weight_decay,
                           beta1=t.beta1, beta2=t.beta2, eps=t.eps, seed=self.seed,
                           augment=self.data.augment, checkpoint_every=t.checkpoint_every,
                           task=self.task)


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is list or origin is list:
        if isinstance(value, str):
            return [value]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, raw, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key '{where}'")
    kwargs = {}
    for name in names:
        if name not in raw:
            continue
        where = f"{path}.{name}" if path else name
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, raw[name], where)
        else:
            kwargs[name] = _check_type(raw[name], hint, where)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}" if path else str(exc)) from None


def parse_config(raw: dict) -> RunConfig:
    return _build(RunConfig, raw, "")


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        apply_override(raw, item)
    return parse_config(raw)


def apply_override(raw: dict, item: str) -> None:
    """Set ``a.b.c=value`` in ``raw``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-object")
    node[parts[-1]] = value


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_datasets(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset]:
    """(train, eval) datasets described by ``cfg.data``."""
    d = cfg.data
    if d.source == "synthetic":
        train = synthetic_dataset(d.n_train, cfg.model.image_size, d.seed, labels=d.labels)
        ev = synthetic_dataset(d.n_eval, cfg.model.image_size, d.eval_seed, labels=d.labels)
    else:
        full = load_cifar10(d.train_path)
        train = full.subset(range(min(d.n_train, len(full))))
        if d.eval_path:
            test = load_cifar10(d.eval_path)
            ev = test.subset(range(min(d.n_eval, len(test))))
        else:
            start = min(d.n_train, len(full))
            ev = full.subset(range(start, min(start + d.n_eval, len(full))))
        if cfg.model.image_size != train.images.shape[1] or cfg.model.channels != 3:
            raise ConfigError("cifar10 needs model.image_size=32 and model.channels=3")
    for ds in (train, ev):
        ds.mean, ds.std = tuple(d.mean), tuple(d.std)
    if len(train) == 0 or len(ev) == 0:
        raise ConfigError("empty train or eval dataset")
    return train, ev
