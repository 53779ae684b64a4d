"""Key-value config files (TOML) with dotted ``--set key=value`` overrides."""

from pathlib import Path

import tomli

from .train import ConfigError, TrainConfig


def parse_value(text):
    """Read a TOML value; bare words that are not valid TOML stay strings."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text.strip()


def load_file(path):
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return tomli.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def apply_overrides(cfg, overrides):
    """Set ``a.b=value`` entries on a nested dict (copied)."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in cfg.items()}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {key!r}")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key!r} descends into a non-table value")
        node[parts[-1]] = parse_value(text)
    return out


def train_config(path=None, overrides=()):
    """TrainConfig from an optional file plus overrides; [model] holds model fields."""
    raw = load_file(path) if path else {}
    raw = apply_overrides(raw, overrides)
    try:
        return TrainConfig.from_dict(raw)
    except TypeError as e:
        raise ConfigError(str(e)) from e
