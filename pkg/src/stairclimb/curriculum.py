"""Terrain-level curriculum: promote on success, demote on failure, reshuffle after the top level."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping

import numpy as np

from .env import StepEvent

N_LEVELS = 10


@dataclass
class CurriculumConfig:
    enabled: bool = True
    start_level: int = 1
    n_levels: int = N_LEVELS

    def __post_init__(self):
        if not 1 <= self.start_level <= self.n_levels:
            raise ValueError(f"start_level must be in 1..{self.n_levels}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CurriculumConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown curriculum config keys: {sorted(unknown)}")
        return cls(**dict(data))


def update(level: int, outcome: "StepEvent | int", rng: np.random.Generator, n_levels: int = N_LEVELS) -> int:
    outcome = StepEvent(int(outcome))
    if not outcome.terminal:
        raise ValueError("curriculum update needs a terminal outcome")
    if not 1 <= level <= n_levels:
        raise ValueError(f"level {level} outside 1..{n_levels}")
    if outcome is StepEvent.GOAL_REACHED:
        if level < n_levels:
            return level + 1
        return int(rng.integers(1, n_levels + 1))
    return max(1, level - 1)


class CurriculumState:
    """Per-agent levels plus the stream used for random reassignment."""

    def __init__(self, n_agents: int, rng: np.random.Generator, start_level: int = 1, n_levels: int = N_LEVELS):
        self.n_levels = n_levels
        self.levels = np.full(n_agents, start_level, dtype=np.int64)
        self.rng = rng

    def apply(self, agent: int, outcome: "StepEvent | int") -> int:
        self.levels[agent] = update(int(self.levels[agent]), outcome, self.rng, self.n_levels)
        return int(self.levels[agent])

    def histogram(self) -> np.ndarray:
        return np.bincount(self.levels - 1, minlength=self.n_levels)


def level_histogram(state: CurriculumState) -> np.ndarray:
    return state.histogram()
