"""Flat key=value config files covering model and training settings.

Every key has a default (the dataclass defaults); unknown keys are an
error, naming the key. Values are coerced to the type of the default.
Lines starting with '#' and blank lines are ignored.
"""

import dataclasses

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return type(default)(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str) -> tuple:
    """Parse a config body into (ModelConfig, TrainConfig)."""
    model_fields = {f.name: f.default for f in dataclasses.fields(ModelConfig)}
    train_fields = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    model_kwargs: dict = {}
    train_kwargs: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in model_fields:
            model_kwargs[key] = _coerce(key, raw, model_fields[key])
        elif key in train_fields:
            train_kwargs[key] = _coerce(key, raw, train_fields[key])
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def load_config(path) -> tuple:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config_text() -> str:
    """Reference config listing every key at its default."""
    lines = ["# model"]
    for f in dataclasses.fields(ModelConfig):
        lines.append(f"{f.name} = {f.default}")
    lines.append("")
    lines.append("# training")
    for f in dataclasses.fields(TrainConfig):
        lines.append(f"{f.name} = {f.default}")
    return "\n".join(lines) + "\n"
