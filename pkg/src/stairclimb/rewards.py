"""Per-step reward terms: stage-dependent task rewards, regularisation penalties, stall penalty.

All functions are vectorised over leading batch dimensions.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping

import numpy as np


class Stage(str, enum.Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"

    @classmethod
    def parse(cls, value: "str | int | Stage") -> "Stage":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        if key in ("1", "stage1", "s1"):
            return cls.STAGE1
        if key in ("2", "stage2", "s2"):
            return cls.STAGE2
        raise ValueError(f"unknown stage {value!r}")


PENALTY_TERMS = ("power", "torque", "action_rate", "joint_limit", "joint_vel", "joint_acc")
TASK_TERMS = {Stage.STAGE1: ("nav_far", "nav_near"), Stage.STAGE2: ("path", "centering")}


@dataclass
class RewardWeights:
    nav_far: float = 1.0
    nav_near: float = 1.5
    centering: float = 0.5
    path: float = 10.0
    goal_bonus: float = 10.0
    power: float = -2e-4
    torque: float = -1e-4
    action_rate: float = -0.01
    joint_limit: float = -1.0
    joint_vel: float = -1e-4
    joint_acc: float = -2.5e-7
    stall: float = 1.0


@dataclass
class RewardConfig:
    stage: Stage = Stage.STAGE2
    weights: RewardWeights = field(default_factory=RewardWeights)
    stall_enabled: bool = True
    stall_speed_threshold: float = 0.3
    stall_penalty_value: float = -1.0
    sigma_near: float = 0.5
    joint_limit: float = 1.2
    path_clip: float = 0.2

    def __post_init__(self):
        self.stage = Stage.parse(self.stage)
        if isinstance(self.weights, Mapping):
            self.weights = RewardWeights(**self.weights)
        for name in PENALTY_TERMS:
            if getattr(self.weights, name) > 0:
                raise ValueError(f"penalty weight {name} must be <= 0")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["stage"] = self.stage.value
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RewardConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown reward config keys: {sorted(unknown)}")
        if "weights" in data:
            w = dict(data["weights"])
            bad = set(w) - {f.name for f in fields(RewardWeights)}
            if bad:
                raise ValueError(f"unknown reward weights: {sorted(bad)}")
            data["weights"] = RewardWeights(**w)
        return cls(**data)


def nav_rewards(d, d_far, sigma_near: float = 0.5):
    """Long-range linear and close-range Gaussian goal-distance rewards."""
    d_far = np.asarray(d_far, dtype=float)
    if np.any(d_far <= 0):
        raise ValueError("d_far must be positive")
    d = np.asarray(d, dtype=float)
    r_far = 1.0 - np.minimum(d / d_far, 1.0)
    r_near = np.exp(-(d**2) / sigma_near**2)
    return r_far, r_near


def stage2_task(progress, lateral_offset, sigma_center, path_clip: float = 0.2):
    r_path = np.clip(progress, -path_clip, path_clip)
    r_center = np.exp(-np.square(lateral_offset) / np.square(sigma_center))
    return r_path, r_center


def stall_penalty(speed, in_goal_region, cfg: RewardConfig):
    """Constant penalty while moving slower than the threshold outside the goal region."""
    stalled = (np.asarray(speed) < cfg.stall_speed_threshold) & ~np.asarray(in_goal_region, dtype=bool)
    return np.where(stalled, cfg.stall_penalty_value, 0.0)


def regularization(torque, joint_vel, joint_acc, action, last_action, joints, joint_limit: float = 1.2):
    """Six regularisation magnitudes (non-negative); weights carry the sign."""
    torque, joint_vel, joint_acc = np.asarray(torque), np.asarray(joint_vel), np.asarray(joint_acc)
    joints = np.asarray(joints)
    excess = np.maximum(0.0, np.abs(joints) - joint_limit)
    return {
        "power": np.sum(np.abs(torque * joint_vel), axis=-1),
        "torque": np.sum(torque**2, axis=-1),
        "action_rate": np.sum((np.asarray(action) - np.asarray(last_action)) ** 2, axis=-1),
        "joint_limit": np.sum(excess**2, axis=-1),
        "joint_vel": np.sum(joint_vel**2, axis=-1),
        "joint_acc": np.sum(joint_acc**2, axis=-1),
    }


@dataclass
class RewardTerms:
    """Named raw terms plus their weighted composition."""

    terms: dict[str, np.ndarray]
    task: np.ndarray
    penalties: np.ndarray
    stall: np.ndarray
    total: np.ndarray


def total(terms: Mapping[str, Any], cfg: RewardConfig) -> RewardTerms:
    """Compose ``task + sum(weight * penalty) + stall`` for the configured stage.

    ``terms`` holds raw (unweighted) values: the stage's task terms, ``goal``
    (0/1 reached flag), the six penalty magnitudes and ``stall`` (already
    negative when active).
    """
    w = cfg.weights
    own = TASK_TERMS[cfg.stage]
    other = TASK_TERMS[Stage.STAGE2 if cfg.stage is Stage.STAGE1 else Stage.STAGE1]
    present_other = [k for k in other if k in terms and np.any(np.asarray(terms[k]) != 0)]
    if present_other:
        raise ValueError(f"{cfg.stage.value} cannot take task terms {present_other}")

    def get(name):
        return np.asarray(terms.get(name, 0.0), dtype=float)

    task = sum(getattr(w, k) * get(k) for k in own) + w.goal_bonus * get("goal")
    penalties = sum(getattr(w, k) * get(k) for k in PENALTY_TERMS)
    stall = w.stall * get("stall") if cfg.stall_enabled else np.zeros_like(get("stall"))
    tot = task + penalties + stall
    raw = {k: get(k) for k in (*own, "goal", *PENALTY_TERMS, "stall")}
    return RewardTerms(terms=raw, task=task, penalties=penalties, stall=stall, total=tot)
