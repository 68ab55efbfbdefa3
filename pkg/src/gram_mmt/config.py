"""Run configuration: a TOML file with ``[model]``, ``[optim]``, ``[train]``
and ``[paths]`` tables. Unknown keys are rejected; omitted keys take defaults.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .model import ModelConfig

DECAYS = ("none", "inverse_sqrt")


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    peak_lr: float = 7e-4
    warmup_steps: int = 4000
    floor_lr: float = 1e-7
    decay: str = "inverse_sqrt"
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    epochs: int = 20
    batch_tokens: int = 3584
    clip_norm: float = 0.0  # 0 disables clipping

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"optim.warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.floor_lr > self.peak_lr:
            raise ConfigError(f"optim.floor_lr={self.floor_lr} exceeds peak_lr={self.peak_lr}")
        if self.decay not in DECAYS:
            raise ConfigError(f"optim.decay must be one of {DECAYS}, got {self.decay!r}")


@dataclass
class TrainConfig:
    gate_log_every: int = 50
    max_steps: int = 0  # 0 means run all epochs
    debug_nan: bool = False
    decode_max_len: int = 50
    beam: int = 1


@dataclass
class PathsConfig:
    vocab: str = ""
    train: str = ""
    valid: str = ""
    test: str = ""
    images: str = ""
    phrases: str = ""
    textonly: str = ""
    commute: str = ""
    init_checkpoint: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "optim": asdict(self.optim),
                "train": asdict(self.train), "paths": asdict(self.paths)}


SECTIONS = {"model": ModelConfig, "optim": OptimizerConfig, "train": TrainConfig, "paths": PathsConfig}


def _coerce(section: str, cls, raw: dict):
    types = {f.name: f.type for f in fields(cls)}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, val in raw.items():
        if key not in types:
            raise ConfigError(f"unknown key {section}.{key}")
        want = type(defaults[key])
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if type(val) is not want:
            raise ConfigError(f"{section}.{key}: expected {want.__name__}, got {type(val).__name__} ({val!r})")
        out[key] = val
    try:
        return cls(**out)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    for key, val in data.items():
        if key not in SECTIONS:
            raise ConfigError(f"unknown section or key {key!r}")
        if not isinstance(val, dict):
            raise ConfigError(f"{key}: expected a table")
    parts = {name: _coerce(name, cls, data.get(name, {})) for name, cls in SECTIONS.items()}
    if base_dir is not None:
        for f in fields(PathsConfig):
            val = getattr(parts["paths"], f.name)
            if val and not Path(val).is_absolute():
                setattr(parts["paths"], f.name, str((base_dir / val).resolve()))
    return RunConfig(**parts)


def load_config(path) -> RunConfig:
    """Parse a run config; relative ``[paths]`` resolve against the file's directory."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data, path.parent)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(cfg.to_dict()), encoding="utf-8")


def preset_path(name: str) -> Path:
    path = Path(__file__).parent / "presets" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no preset named {name!r}")
    return path
