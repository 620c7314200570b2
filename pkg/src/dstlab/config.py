"""Flat ``key = value`` experiment configs.

Blank lines and ``#`` comments are ignored. Every key has a default, so a
config file only lists what it changes. Unknown keys are rejected by name.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .autograd import PRESETS
from .criteria import GROWTH_NAMES, PRUNE_NAMES


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text: str) -> int | None:
    low = text.strip().lower()
    if low in ("none", "inf", "static", ""):
        return None
    return int(low)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    architecture: str = "small-mlp"
    dataset: str = "synth-tabular"
    data_samples: int = 20_000
    data_features: int = 24
    data_cells: int = 3
    data_seed: int = 0
    label_column: str = "label"
    max_train_samples: int | None = None
    split: tuple[float, ...] = (0.7, 0.15, 0.15)
    density: float = 0.05
    init: str = "auto"
    criterion: str = "magnitude"
    mest_lambda: float = 1.0
    growth: str = "random"
    update_period: int | None = 800
    update_stop_fraction: float = 1.0
    prune_fraction: float = 0.5
    prune_schedule: str = "cosine"
    linear_factor: float = 0.99
    linear_every: int = 600
    pruning_scope: str = "local"
    dst_update_batch_size: int | None = None
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    lr_decay: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    nesterov: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.architecture not in PRESETS:
            raise ConfigError(f"architecture: unknown preset {self.architecture!r}; valid options: {', '.join(PRESETS)}")
        if self.criterion not in PRUNE_NAMES:
            raise ConfigError(f"criterion: unknown value {self.criterion!r}; valid options: {', '.join(PRUNE_NAMES)}")
        if self.growth not in GROWTH_NAMES:
            raise ConfigError(f"growth: unknown value {self.growth!r}; valid options: {', '.join(GROWTH_NAMES)}")
        if self.pruning_scope not in ("local", "global"):
            raise ConfigError(f"pruning_scope: expected local or global, got {self.pruning_scope!r}")
        if self.prune_schedule not in ("cosine", "linear", "constant"):
            raise ConfigError(f"prune_schedule: expected cosine, linear or constant, got {self.prune_schedule!r}")
        if self.init not in ("auto", "er", "erk"):
            raise ConfigError(f"init: expected auto, er or erk, got {self.init!r}")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density: must lie in (0, 1], got {self.density}")
        if not 0.0 <= self.prune_fraction <= 1.0:
            raise ConfigError(f"prune_fraction: must lie in [0, 1], got {self.prune_fraction}")
        if not 0.0 < self.update_stop_fraction <= 1.0:
            raise ConfigError("update_stop_fraction: must lie in (0, 1]")
        if self.update_period is not None and self.update_period < 1:
            raise ConfigError("update_period: must be >= 1 or none")
        if self.data_cells < 2:
            raise ConfigError("data_cells: must be >= 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split: expected three fractions summing to 1, got {self.split}")
        if self.mest_lambda < 0:
            raise ConfigError("mest_lambda: must be non-negative")

    # -- text round trip -------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self, include_seed: bool = False) -> str:
        cfg = self if include_seed else replace(self, seed=0)
        return hashlib.sha256(cfg.to_text().encode("utf-8")).hexdigest()[:12]

    def run_name(self) -> str:
        return f"{self.digest()}-s{self.seed}"

    def with_updates(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_PARSERS = {
    "architecture": str, "dataset": str, "init": str, "criterion": str, "growth": str,
    "prune_schedule": str, "pruning_scope": str, "label_column": str,
    "data_samples": int, "data_features": int, "data_cells": int, "data_seed": int, "linear_every": int,
    "epochs": int, "batch_size": int, "seed": int,
    "max_train_samples": _opt_int, "update_period": _opt_int, "dst_update_batch_size": _opt_int,
    "density": float, "mest_lambda": float, "update_stop_fraction": float, "prune_fraction": float,
    "linear_factor": float, "lr": float, "lr_decay": float, "momentum": float, "weight_decay": float,
    "split": _floats, "milestones": _floats, "nesterov": _bool,
}
CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))
assert set(_PARSERS) == set(CONFIG_KEYS)


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def config_from_pairs(pairs: dict[str, str], source: str = "<config>") -> ExperimentConfig:
    kwargs = {}
    for key, value in pairs.items():
        if key not in _PARSERS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        try:
            kwargs[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from None
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    return config_from_pairs(parse_pairs(text, source), source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = {
    "densities": ("density", float),
    "criteria": ("criterion", str),
    "growth": ("growth", str),
    "seeds": ("seed", int),
    "update_periods": ("update_period", _opt_int),
}


@dataclass
class SweepSpec:
    base: ExperimentConfig
    axes: dict[str, list] = field(default_factory=dict)

    def configs(self) -> list[ExperimentConfig]:
        grid = [self.base]
        for axis, (key, _) in SWEEP_AXES.items():
            values = self.axes.get(axis)
            if not values:
                continue
            grid = [replace(cfg, **{key: v}) for cfg in grid for v in values]
        if not grid:
            raise ConfigError("sweep grid is empty")
        return grid


def parse_sweep(text: str, source: str = "<sweep>") -> SweepSpec:
    """Config keys plus list-valued axes (``densities = 0.05, 0.1``)."""
    pairs = parse_pairs(text, source)
    axes = {}
    for axis, (key, conv) in SWEEP_AXES.items():
        if axis in pairs and axis != key:
            raw = pairs.pop(axis)
            try:
                axes[axis] = [conv(v.strip()) for v in raw.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {axis!r}: {exc}") from None
            if not axes[axis]:
                raise ConfigError(f"{source}: axis {axis!r} is empty")
    # "growth" doubles as a plain key and an axis; a comma makes it an axis
    if "growth" in pairs and "," in pairs["growth"]:
        axes["growth"] = [v.strip() for v in pairs.pop("growth").split(",") if v.strip()]
    base = config_from_pairs(pairs, source)
    spec = SweepSpec(base, axes)
    for cfg in spec.configs():
        cfg.validate()
    return spec


def load_sweep(path) -> SweepSpec:
    path = Path(path)
    return parse_sweep(path.read_text(encoding="utf-8"), str(path))
