"""Run configuration: a flat dotted-key text format and its validation.

File format: one ``section.key = value`` per line, ``#`` comments allowed.
Values are parsed as bool/int/float/string by inspection; serialization is
canonical so parse -> serialize -> parse is the identity on the mapping.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Optional

from .errors import ConfigError

VARIANTS = ("baseline", "sit", "sat", "sat_dyn")

DEFAULT_STAGES = "conv:3:48:11:2,pool:3:2,conv:48:96:5:1,pool:3:2,conv:96:192:3:1,conv:192:192:3:1,conv:192:96:3:1"

# miniature stack used by fast tests: template 15 -> 5, search 31 -> 13
TINY_STAGES = "conv:3:8:3:2,conv:8:16:3:1"


@dataclass
class RunConfig:
    # model
    channels: int = 96
    heads: int = 4
    grid: int = 16
    window: int = 4
    fine_threshold: float = 0.5
    gumbel_tau: float = 1.0
    variant: str = "sat_dyn"
    positional_encoding: bool = True
    template_size: int = 127
    search_size: int = 287
    stages: str = DEFAULT_STAGES
    ffn_hidden_factor: int = 4
    # train
    lr: float = 5e-4
    lr_schedule: str = "constant"
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    momentum: float = 0.9
    iterations: int = 200
    seed: int = 42
    shift_jitter: float = 24.0
    scale_jitter: float = 0.18
    # tracker
    window_penalty: float = 0.3
    size_ema: float = 0.7
    # paths
    checkpoint: str = ""
    sequence: str = ""
    output: str = ""

    _SECTIONS = {
        "model": ("channels", "heads", "grid", "window", "fine_threshold",
                  "gumbel_tau", "variant", "positional_encoding",
                  "template_size", "search_size", "stages", "ffn_hidden_factor"),
        "train": ("lr", "lr_schedule", "lr_start", "lr_end", "momentum",
                  "iterations", "seed", "shift_jitter", "scale_jitter"),
        "tracker": ("window_penalty", "size_ema"),
        "paths": ("checkpoint", "sequence", "output"),
    }

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.fine_threshold <= 1.0:
            raise ConfigError(f"model.fine_threshold must be in [0,1], got {self.fine_threshold}")
        if self.gumbel_tau <= 0:
            raise ConfigError(f"model.gumbel_tau must be > 0, got {self.gumbel_tau}")
        if not 0.0 <= self.window_penalty <= 1.0:
            raise ConfigError(f"tracker.window_penalty must be in [0,1], got {self.window_penalty}")
        if not 0.0 <= self.size_ema < 1.0:
            raise ConfigError(f"tracker.size_ema must be in [0,1), got {self.size_ema}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"train.momentum must be in [0,1), got {self.momentum}")
        if self.channels % self.heads != 0:
            raise ConfigError(f"model.channels ({self.channels}) must divide by heads ({self.heads})")
        if self.grid % self.window != 0:
            raise ConfigError(f"model.grid ({self.grid}) must divide by window ({self.window})")
        if self.window % 2 != 0:
            raise ConfigError(f"model.window must be even for the 2x2 split, got {self.window}")
        if self.positional_encoding and self.channels % 4 != 0:
            raise ConfigError("model.channels must be a multiple of 4 with positional encoding on")
        if self.lr_schedule not in ("constant", "log"):
            raise ConfigError(f"train.lr_schedule must be constant|log, got {self.lr_schedule!r}")
        if self.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        return self

    def seed_with_env(self) -> int:
        env = os.environ.get("SGDVIT_SEED")
        return int(env) if env else self.seed

    # -- dotted-key mapping -------------------------------------------------

    def to_mapping(self) -> dict[str, object]:
        out = {}
        for section, names in self._SECTIONS.items():
            for name in names:
                out[f"{section}.{name}"] = getattr(self, name)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict[str, object]) -> "RunConfig":
        key_to_field = {}
        for section, names in cls._SECTIONS.items():
            for name in names:
                key_to_field[f"{section}.{name}"] = name
        kwargs = {}
        for key, value in mapping.items():
            if key not in key_to_field:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key_to_field[key]] = value
        cfg = cls(**kwargs)
        # enforce declared field types on parsed values
        for f in fields(cls):
            if f.name.startswith("_"):
                continue
            v = getattr(cfg, f.name)
            if f.type in ("int",) and isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected int, got bool")
            if f.type == "int" and not isinstance(v, int):
                raise ConfigError(f"{f.name}: expected int, got {type(v).__name__}")
            if f.type == "float" and isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected float, got bool")
            if f.type == "float" and isinstance(v, int):
                setattr(cfg, f.name, float(v))
            elif f.type == "float" and not isinstance(v, float):
                raise ConfigError(f"{f.name}: expected float, got {type(v).__name__}")
            if f.type == "bool" and not isinstance(v, bool):
                raise ConfigError(f"{f.name}: expected bool, got {type(v).__name__}")
            if f.type == "str" and not isinstance(v, str):
                raise ConfigError(f"{f.name}: expected string, got {type(v).__name__}")
        return cfg.validate()


def parse_value(text: str):
    t = text.strip()
    if t.lower() in ("true", "false"):
        return t.lower() == "true"
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    if len(t) >= 2 and t[0] == '"' and t[-1] == '"':
        return t[1:-1]
    return t


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        # quote anything that would re-parse as a different type
        probe = parse_value(value)
        if not isinstance(probe, str) or value != value.strip() or value == "":
            return f'"{value}"'
        return value
    return str(value)


def parse_config_text(text: str) -> dict[str, object]:
    mapping: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        mapping[key.strip()] = parse_value(value)
    return mapping


def serialize_config(mapping: dict[str, object]) -> str:
    lines = [f"{k} = {format_value(v)}" for k, v in sorted(mapping.items())]
    return "\n".join(lines) + "\n"


def load_config(path: str, overrides: Optional[dict[str, object]] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            mapping = parse_config_text(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    if overrides:
        mapping.update(overrides)
    base = RunConfig().to_mapping()
    base.update(mapping)
    return RunConfig.from_mapping(base)


def save_config(path: str, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg.to_mapping()))
