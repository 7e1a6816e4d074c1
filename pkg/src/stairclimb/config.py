"""Run configuration: one JSON document holds every tunable; unknown keys are rejected."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .curriculum import CurriculumConfig
from .env import EnvConfig
from .ppo import PpoConfig
from .rewards import RewardConfig, Stage
from .terrain import StairKind

SEED_ENV_VAR = "STAIRCLIMB_SEED"


@dataclass
class TerrainConfig:
    kind: StairKind = StairKind.STRAIGHT

    def __post_init__(self):
        self.kind = StairKind.parse(self.kind)


@dataclass
class EvalConfig:
    episodes: int = 300
    levels: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    mode: str = "test"

    def __post_init__(self):
        self.levels = tuple(int(v) for v in self.levels)


@dataclass
class RunConfig:
    seed: int = 0
    stage: Stage = Stage.STAGE2
    terrain: TerrainConfig = field(default_factory=TerrainConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    def __post_init__(self):
        self.stage = Stage.parse(self.stage)
        # the reward stage always follows the training stage
        self.rewards.stage = self.stage

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "stage": self.stage.value,
            "terrain": {"kind": self.terrain.kind.value},
            "ppo": self.ppo.to_dict(),
            "rewards": self.rewards.to_dict(),
            "env": self.env.to_dict(),
            "curriculum": self.curriculum.to_dict(),
            "eval": {"episodes": self.eval.episodes, "levels": list(self.eval.levels), "mode": self.eval.mode},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for key in ("seed", "stage", "output_dir"):
            if key in data:
                kw[key] = data[key]
        if "terrain" in data:
            kw["terrain"] = _strict(TerrainConfig, data["terrain"], "terrain")
        if "eval" in data:
            kw["eval"] = _strict(EvalConfig, data["eval"], "eval")
        if "ppo" in data:
            kw["ppo"] = PpoConfig.from_dict(data["ppo"])
        if "rewards" in data:
            rewards = dict(data["rewards"])
            rewards.pop("stage", None)
            kw["rewards"] = RewardConfig.from_dict(rewards)
        if "env" in data:
            kw["env"] = EnvConfig.from_dict(data["env"])
        if "curriculum" in data:
            kw["curriculum"] = CurriculumConfig.from_dict(data["curriculum"])
        if "terrain" not in data and Stage.parse(kw.get("stage", Stage.STAGE2)) is Stage.STAGE1:
            kw["terrain"] = TerrainConfig(StairKind.PYRAMID)
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_resolved(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "resolved_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _strict(cls, data: Mapping[str, Any], section: str):
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {section} config keys: {sorted(unknown)}")
    return cls(**dict(data))


def seed_override(default: int) -> int:
    value = os.environ.get(SEED_ENV_VAR)
    return int(value) if value not in (None, "") else default
