"""Plain-text configuration files: INI sections with dotted nesting.

Example:

    [train]
    arch = smallnet
    embed_dim = 20
    epochs = 5
    [train.warp]
    scale_range = 0.9, 1.1
    control_grid = 3, 3

Values parse as int, float, bool (true/false), none, a comma-separated
tuple of numbers, or fall back to a string. Unknown keys are rejected by
name so typos cannot silently change a run.
"""

from __future__ import annotations

import configparser
import dataclasses
import os

from .errors import ConfigurationError
from .trainer import TrainConfig
from .warps import WarpConfig


def _parse_value(raw: str):
    s = raw.strip()
    if "," in s:
        return tuple(_parse_value(part) for part in s.split(","))
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def load_config(path: str) -> dict:
    """Parse a config file into nested dicts keyed by dotted section names."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigurationError(f"{path}: {e}") from None
    tree: dict = {}
    for section in parser.sections():
        node = tree
        for part in section.split("."):
            node = node.setdefault(part, {})
        for key, raw in parser.items(section):
            node[key] = _parse_value(raw)
    return tree


def _build_dataclass(cls, values: dict, prefix: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigurationError(f"unknown config key {prefix}.{key}")
        if dataclasses.is_dataclass(fields[key].type) or key == "warp":
            kwargs[key] = _build_dataclass(WarpConfig, val, f"{prefix}.{key}")
        else:
            kwargs[key] = val
    return cls(**kwargs)


def train_config_from_tree(tree: dict) -> TrainConfig:
    section = dict(tree.get("train", {}))
    return _build_dataclass(TrainConfig, section, "train")


def apply_overrides(cfg, overrides: dict):
    """Set explicit CLI flag values on top of a config object."""
    for key, val in overrides.items():
        if val is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigurationError(f"unknown config key train.{key}")
        setattr(cfg, key, val)
    # re-run validation with the final values
    cfg.__post_init__()
    return cfg


def dump_config(cfg: TrainConfig, path: str) -> None:
    """Write the effective training configuration back out as sections."""
    lines = ["[train]"]
    warp_lines = ["[train.warp]"]
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if f.name == "warp":
            for wf in dataclasses.fields(val):
                wval = getattr(val, wf.name)
                warp_lines.append(f"{wf.name} = {_format_value(wval)}")
            continue
        lines.append(f"{f.name} = {_format_value(val)}")
    with open(path, "w") as out:
        out.write("\n".join(lines + warp_lines) + "\n")


def _format_value(val) -> str:
    if isinstance(val, (tuple, list)):
        return ", ".join(str(v) for v in val)
    if val is None:
        return "none"
    if isinstance(val, bool):
        return "true" if val else "false"
    return str(val)
