"""Flat ``key = value`` run configuration covering model and optimiser fields."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .mac import ConfigError, MacConfig


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3  # desk-scale default; see README
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 8.0
    ema_decay: float = 0.999
    use_ema: bool = True
    patience: int = 5
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")


@dataclass
class RunConfig:
    model: MacConfig
    train: TrainConfig

    def to_dict(self) -> dict:
        return {**asdict(self.model), **asdict(self.train)}

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(MacConfig(), TrainConfig())

    def with_overrides(self, overrides: dict) -> "RunConfig":
        model_names = {f.name: f for f in fields(MacConfig)}
        train_names = {f.name: f for f in fields(TrainConfig)}
        m, t = {}, {}
        for key, raw in overrides.items():
            if key in model_names:
                m[key] = coerce(raw, model_names[key].type, key)
            elif key in train_names:
                t[key] = coerce(raw, train_names[key].type, key)
            else:
                raise ConfigError(f"unknown config field {key!r}")
        return RunConfig(replace(self.model, **m), replace(self.train, **t))


def coerce(raw, type_name, key: str):
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if type_name == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type_name}") from None


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig.default()
    if path is not None:
        cfg = cfg.with_overrides(parse_config_text(Path(path).read_text()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {v}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"
