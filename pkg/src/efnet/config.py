"""``key = value`` config files for the model and the training loop.

Lists are comma-separated; ``#`` starts a comment.  Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import fields

from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
# "resolution = 32" or "resolution = 32,48" sets height and width together
_ALIASES = {"resolution"}


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v.strip()) for v in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r}") from None


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in _ALIASES:
            try:
                parts = [int(v) for v in raw.split(",")]
            except ValueError:
                raise ConfigError(key, f"cannot parse {raw!r}") from None
            if len(parts) not in (1, 2):
                raise ConfigError(key, "expects one or two integers")
            model_kw["height"], model_kw["width"] = parts[0], parts[-1]
        elif key in _MODEL_KEYS:
            model_kw[key] = _convert(key, raw, _MODEL_KEYS[key].default)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _convert(key, raw, _TRAIN_KEYS[key].default)
        else:
            raise ConfigError(key, f"unknown key (line {lineno})")
    return ModelConfig(**model_kw), TrainConfig(**train_kw)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def dump_model_config(cfg: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = ["# model"] + [f"{f.name} = {_fmt(getattr(cfg, f.name))}" for f in fields(ModelConfig)]
    if train is not None:
        lines += ["# training"] + [f"{f.name} = {_fmt(getattr(train, f.name))}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"
