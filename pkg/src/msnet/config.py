"""Run configuration: defaults, ``key = value`` files, and derived configs."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .losses import LossConfig, default_pool_k
from .model import ModelConfig

MODEL_FIELDS = ("input_size", "channels", "pyramid_depth", "fusion_mode", "lossnet_enabled", "seed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # architecture
    input_size: int = 64
    channels: int = 16
    pyramid_depth: int = 5
    fusion_mode: str = "subtract"
    lossnet_enabled: bool = True
    seed: int = 0
    # objective; pool_k = 0 derives the window from input_size
    weight_gain: float = 5.0
    pool_k: int = 0
    lossnet_seed: int = 0
    eps: float = 1e-7
    # optimisation
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_backbone_max: float = 0.005
    lr_head_max: float = 0.005
    epochs: int = 30
    batch_size: int = 8
    warmup_fraction: float = 0.1
    grad_clip: float = 10.0  # global L2 norm cap; 0 disables
    scales: str = "0.75,1.0,1.25"
    augment: bool = True
    # data
    data_dir: str = "data"
    n: int = 100
    split_ratios: str = "0.8,0.1,0.1"
    difficulty: str = "easy"
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lr_backbone_max <= 0 or self.lr_head_max <= 0:
            raise ConfigError("learning rates must be positive")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        try:
            self.model_config()
            self.loss_config()
            self.scale_set()
            self.ratios()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.input_size, self.channels, self.pyramid_depth, self.fusion_mode,
                           self.lossnet_enabled, self.seed)

    def loss_config(self) -> LossConfig:
        k = self.pool_k or default_pool_k(self.input_size)
        return LossConfig(self.weight_gain, k, self.lossnet_seed, 4, self.eps)

    def scale_set(self) -> tuple[float, ...]:
        values = tuple(float(s) for s in self.scales.split(",") if s.strip())
        if not values or any(v <= 0 for v in values):
            raise ValueError(f"scales must be positive numbers, got {self.scales!r}")
        return values

    def ratios(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.split_ratios.split(","))

    def with_model(self, model: ModelConfig) -> "RunConfig":
        return replace(self, **{k: getattr(model, k) for k in MODEL_FIELDS})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind if isinstance(kind, str) else kind.__name__}") \
            from None
    return raw


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, FIELD_TYPES[key])
    return values


def load_config(path=None, overrides: dict | None = None) -> tuple[RunConfig, set[str]]:
    """Defaults <- file <- overrides. Also returns the names set explicitly."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return RunConfig(**values), set(values)
