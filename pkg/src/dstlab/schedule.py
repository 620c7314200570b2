"""Prune-fraction schedules, update cadence and step learning-rate decay."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PruneSchedule:
    kind: str = "cosine"  # cosine | linear | constant
    rho: float = 0.5
    stop: int = 1  # cosine only: iteration after which the fraction is 0
    factor: float = 0.99  # linear only
    every: int = 600  # linear only

    def __post_init__(self):
        if self.kind not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown prune schedule {self.kind!r}; expected cosine, linear or constant")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"prune fraction must lie in [0, 1], got {self.rho}")
        if self.stop < 1:
            raise ValueError("stop iteration must be >= 1")
        if not 0.0 < self.factor <= 1.0 or self.every < 1:
            raise ValueError("linear schedule needs 0 < factor <= 1 and every >= 1")


def prune_fraction_at(schedule: PruneSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.kind == "cosine":
        if t > schedule.stop:
            return 0.0
        return 0.5 * schedule.rho * (1.0 + math.cos(t * math.pi / schedule.stop))
    if schedule.kind == "linear":
        return schedule.rho * schedule.factor ** (t // schedule.every)
    return schedule.rho


@dataclass(frozen=True)
class UpdateCadence:
    period: int | None  # None disables updates (static sparse training)
    stop: int

    def __post_init__(self):
        if self.period is not None and self.period < 1:
            raise ValueError("update period must be >= 1")


def is_update_step(cadence: UpdateCadence, t: int) -> bool:
    if cadence.period is None:
        return False
    return t % cadence.period == 0 and t <= cadence.stop


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.01
    milestones: tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"lr decay must lie in (0, 1], got {self.gamma}")


def lr_at(schedule: LrSchedule, epoch: int, total_epochs: int) -> float:
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    passed = sum(1 for m in schedule.milestones if epoch >= m * total_epochs)
    return schedule.base_lr * schedule.gamma ** passed
