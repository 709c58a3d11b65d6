"""Run configuration: the training hyperparameters plus the model they train.

Run-config files are flat ``key = value`` text, the same syntax as ``.env``,
read with ``dotenv_values``. Keys are the field names of ``TrainConfig`` and
``ModelConfig``; values are typed from the dataclass annotations:

    model = cgegnn
    orders = 1,2
    lr = 0.001
    cosine = true

Precedence: built-in defaults < task fields < config file < command-line flags.
"""

from __future__ import annotations

import dataclasses
import io
import typing
from dataclasses import dataclass, field

from dotenv import dotenv_values

from services.cgegnn import ModelConfig
from services.errors import ConfigError


@dataclass(frozen=True)
class TrainConfig:
    task: str = "hull3d"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 100
    max_iters: int = 1000
    eval_every: int = 50
    patience: int = 50  # evaluations without improvement
    cosine: bool = False
    seed: int = 0
    network: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iters < 1 or self.eval_every < 1 or self.patience < 1:
            raise ConfigError("max_iters, eval_every and patience must be >= 1")


TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "network")
MODEL_KEYS = tuple(f.name for f in dataclasses.fields(ModelConfig))

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def coerce(key: str, value):
    """Convert a raw string (or already typed flag value) to the field's type."""
    if key in TRAIN_KEYS:
        kind = _field_types(TrainConfig)[key]
    elif key in MODEL_KEYS:
        kind = _field_types(ModelConfig)[key]
    else:
        raise ConfigError(f"unknown config key {key!r}")
    if not isinstance(value, str):
        return tuple(value) if typing.get_origin(kind) is tuple else value
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if typing.get_origin(kind) is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def read_config_file(path: str) -> dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    values = dotenv_values(stream=io.StringIO(text))
    missing = [k for k, v in values.items() if v is None]
    if missing:
        raise ConfigError(f"keys without a value: {', '.join(missing)}")
    return dict(values)


def build_train_config(*layers: dict) -> TrainConfig:
    """Merge layers left to right (later wins); None values are skipped."""
    train_kwargs: dict = {}
    model_kwargs: dict = {}
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            typed = coerce(key, value)
            if key in TRAIN_KEYS:
                train_kwargs[key] = typed
            else:
                model_kwargs[key] = typed
    return TrainConfig(network=ModelConfig(**model_kwargs), **train_kwargs)


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_text(cfg: TrainConfig) -> str:
    """Flat key = value text that parse_config_text/build_train_config read back exactly."""
    lines = [f"{key} = {_render(getattr(cfg, key))}" for key in TRAIN_KEYS]
    lines += [f"{key} = {_render(getattr(cfg.network, key))}" for key in MODEL_KEYS]
    return "\n".join(lines) + "\n"


def from_config_text(text: str) -> TrainConfig:
    return build_train_config(parse_config_text(text))
