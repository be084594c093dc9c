"""Run configuration: schema, file loading, overrides, and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import SchemaError

CONFIG_VERSION = 1


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class DataConfig:
    name: str = "synthetic"
    root: str = "data"
    num_classes: int = 10
    subset_fraction: float = 1.0
    augment: bool = True
    image_size: int = 16
    train_per_class: int = 128
    test_per_class: int = 100
    noise: float = 0.35
    seed: int = 0


@dataclass
class ModelConfig:
    arch: str = "resnet"
    depth: int = 8
    base_channels: int = 8
    hidden_dims: tuple = (64,)
    feature_dim: int = 32
    in_dim: int = 0  # mlp only; 0 means infer from the dataset


@dataclass
class DistillConfig:
    """Every knob of a distillation run.

    ``pairs_per_batch`` is "all" (every ordered pair, batch^2 of them,
    diagonal included), "diagonal" (only same-sample pairs, the
    degenerate sample-level mode), or an integer subsample size.
    """

    tau: float = 0.05
    negatives: int = 500
    alpha: float = 1.0
    beta1: float = 0.5
    beta2: float = 0.5
    rho: float = 4.0
    relation_dim: int = 256
    proj_dim: int = 128
    batch_size: int = 64
    pairs_per_batch: Any = "all"
    critic_mode: str = "linear"
    sampling_policy: str = "queue"
    higher_order: bool = True
    normalize_gradients: bool = True
    literal_negative_scale: bool = False
    queue_capacity: int | None = None  # defaults to `negatives`
    epochs: int = 30
    seed: int = 0
    lr_milestones: tuple = (0.6, 0.75, 0.9)
    lr_decay: float = 0.1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    student: ModelConfig = field(default_factory=ModelConfig)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(depth=14, base_channels=16))
    teacher_epochs: int = 60
    teacher_checkpoint: str = ""

    def validate(self) -> None:
        positives = {
            "tau": self.tau, "rho": self.rho, "negatives": self.negatives,
            "relation_dim": self.relation_dim, "proj_dim": self.proj_dim,
            "batch_size": self.batch_size, "lr": self.optimizer.lr,
        }
        for name, value in positives.items():
            if value <= 0:
                raise SchemaError(name, f"must be positive, got {value}")
        for name, value in (("alpha", self.alpha), ("beta1", self.beta1),
                            ("beta2", self.beta2), ("epochs", self.epochs)):
            if value < 0:
                raise SchemaError(name, f"must be >= 0, got {value}")
        if isinstance(self.pairs_per_batch, str):
            if self.pairs_per_batch not in ("all", "diagonal"):
                raise SchemaError("pairs_per_batch", f"bad value {self.pairs_per_batch!r}")
        elif isinstance(self.pairs_per_batch, int):
            if not 1 <= self.pairs_per_batch <= self.batch_size ** 2:
                raise SchemaError(
                    "pairs_per_batch",
                    f"must be in [1, batch_size^2={self.batch_size ** 2}]",
                )
        else:
            raise SchemaError("pairs_per_batch", "must be 'all', 'diagonal', or int")
        if self.critic_mode not in ("linear", "identity", "nonlinear"):
            raise SchemaError("critic_mode", f"bad value {self.critic_mode!r}")
        if self.sampling_policy not in ("queue", "random"):
            raise SchemaError("sampling_policy", f"bad value {self.sampling_policy!r}")
        if self.queue_capacity is not None and self.queue_capacity < 1:
            raise SchemaError("queue_capacity", "must be >= 1 when set")

    @property
    def effective_queue_capacity(self) -> int:
        return self.queue_capacity if self.queue_capacity is not None else self.negatives


_NESTED = {"optimizer": OptimizerConfig, "data": DataConfig,
           "student": ModelConfig, "teacher": ModelConfig}


def config_to_dict(cfg: DistillConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["version"] = CONFIG_VERSION
    return d


def config_from_dict(raw: dict) -> DistillConfig:
    """Build a config from a plain dict, rejecting unknown fields."""
    raw = dict(raw)
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise SchemaError("version", f"unsupported config version {version}")
    known = {f.name for f in dataclasses.fields(DistillConfig)}
    for key in raw:
        if key not in known:
            raise SchemaError(key, "unknown field")
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _NESTED:
            sub_cls = _NESTED[key]
            sub_known = {f.name for f in dataclasses.fields(sub_cls)}
            for sub_key in value:
                if sub_key not in sub_known:
                    raise SchemaError(f"{key}.{sub_key}", "unknown field")
            kwargs[key] = sub_cls(**{k: _coerce_seq(v) for k, v in value.items()})
        else:
            kwargs[key] = _coerce_seq(value)
    cfg = DistillConfig(**kwargs)
    cfg.validate()
    return cfg


def _coerce_seq(value):
    return tuple(value) if isinstance(value, list) else value


def load_config(path: str | Path) -> DistillConfig:
    """Load a TOML or JSON config file."""
    path = Path(path)
    text = path.read_bytes()
    if path.suffix == ".json":
        raw = json.loads(text)
    else:
        raw = tomllib.loads(text.decode())
    return config_from_dict(raw)


def apply_overrides(cfg: DistillConfig, overrides: list[str]) -> DistillConfig:
    """Apply ``key=value`` overrides with dotted paths (e.g. optimizer.lr=0.01)."""
    d = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise SchemaError(item, "override must be key=value")
        key, _, raw_value = item.partition("=")
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise SchemaError(key, "unknown override path")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise SchemaError(key, "unknown override path")
        node[leaf] = _parse_override_value(raw_value, node[leaf])
    return config_from_dict(d)


def _parse_override_value(raw: str, current):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise SchemaError(raw, "expected a boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError:
            pass  # fall through, e.g. pairs_per_batch="all" -> 64
    if isinstance(current, float):
        return float(raw)
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, ValueError):
        return raw


def config_hash(cfg: DistillConfig, ignore_seed: bool = False) -> str:
    """Stable hash of the config; ``ignore_seed`` groups seed replicates."""
    d = config_to_dict(cfg)
    if ignore_seed:
        d.pop("seed", None)
        d.get("data", {}).pop("seed", None)
    blob = json.dumps(d, sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_config(cfg: DistillConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, default=list) + "\n")
