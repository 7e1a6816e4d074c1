"""Evaluation artifacts: per-level success rates, transfer matrices and critic heatmaps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .env import (
    GRAVITY_BODY,
    N_JOINTS,
    NOMINAL_STANCE,
    OBS_DIM,
    OBS_SLICES,
    EnvConfig,
    StepEvent,
    TerrainBank,
    VecEnv,
    scripted_walker,
)
from .export import write_grid_csv, write_pgm16
from .net import PolicyParams, forward
from .terrain import VOID_HEIGHT, HeightField, Mode, StairKind, local_heightmap, wrap_angle

# (obs, env) -> actions
Policy = Callable[[np.ndarray, VecEnv], np.ndarray]

TRANSFER_COLUMNS = ["model", "terrain", "s_level3", "s_level4", "total", "transferability"]
NA = "N/A"


def network_policy(params: PolicyParams) -> Policy:
    """Deterministic policy: the action is the Gaussian mean."""

    def act(obs, env):
        return forward(params, obs).action_mean.astype(np.float64)

    return act


def random_policy(seed: int) -> Policy:
    rng = np.random.default_rng(seed)

    def act(obs, env):
        return rng.uniform(-1.0, 1.0, (env.n, N_JOINTS))

    return act


def scripted_policy() -> Policy:
    return lambda obs, env: scripted_walker(env)


@dataclass
class EvalReport:
    kind: StairKind
    level: int
    episodes: int
    successes: int
    success_rate: float
    s_transfer: float | None = None
    s_target_trained: float | None = None
    transferability: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 100.0:
            raise ValueError("success rate must lie in [0, 100]")


def rate(successes: int, episodes: int) -> float:
    if episodes < 1:
        raise ValueError("need at least one episode")
    return 100.0 * successes / episodes


def episode_outcomes(
    policy: Policy,
    kind,
    level: int,
    n_episodes: int,
    seed: int,
    mode: "Mode | str" = Mode.TEST,
    env_cfg: EnvConfig | None = None,
    bank: TerrainBank | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Terminal event of each of ``n_episodes`` seeded episodes, run side by side."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    kind = StairKind.parse(kind)
    mode = Mode(mode)
    bank = bank or TerrainBank.build([kind], mode, [level])
    env = VecEnv(bank, n_episodes, env_cfg, workers=workers)
    seeds = np.random.SeedSequence(seed).generate_state(n_episodes)
    obs = np.stack([env.reset(i, kind, level, int(seeds[i]), mode) for i in range(n_episodes)])
    outcome = np.full(n_episodes, int(StepEvent.RUNNING))
    while np.any(outcome == StepEvent.RUNNING):
        res = env.step(policy(obs, env))
        fresh = (outcome == StepEvent.RUNNING) & (res.events != StepEvent.RUNNING)
        outcome[fresh] = res.events[fresh]
        obs = res.obs
    env.close()
    return outcome


def success_rate(
    policy: Policy,
    kind,
    level: int,
    n_episodes: int = 300,
    seed: int = 0,
    mode: "Mode | str" = Mode.TEST,
    env_cfg: EnvConfig | None = None,
    workers: int = 1,
) -> EvalReport:
    out = episode_outcomes(policy, kind, level, n_episodes, seed, mode, env_cfg, workers=workers)
    wins = int(np.sum(out == StepEvent.GOAL_REACHED))
    return EvalReport(StairKind.parse(kind), int(level), n_episodes, wins, rate(wins, n_episodes))


def level_sweep(policy: Policy, kind, levels: Iterable[int], n_episodes: int = 300, seed: int = 0,
                mode: "Mode | str" = Mode.TEST, env_cfg: EnvConfig | None = None,
                workers: int = 1) -> list[EvalReport]:
    return [success_rate(policy, kind, lvl, n_episodes, seed, mode, env_cfg, workers) for lvl in levels]


def write_level_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["terrain", "level", "episodes", "successes", "success_rate"])
        for r in reports:
            w.writerow([r.kind.value, r.level, r.episodes, r.successes, repr(r.success_rate)])


def total_success(s_l3: float, s_l4: float) -> float:
    for s in (s_l3, s_l4):
        if not 0.0 <= s <= 100.0:
            raise ValueError(f"success rate {s} outside [0, 100]")
    return (s_l3 + s_l4) / 2.0


def transferability(s_transfer: float, s_target_trained: float) -> float | None:
    """Percent of the target-trained model's success kept by a transferred model; ``None`` is N/A."""
    if s_target_trained <= 0:
        return None
    return 100.0 * s_transfer / s_target_trained


@dataclass
class TransferRow:
    model: str
    terrain: StairKind
    s_level3: float | None
    s_level4: float | None
    total: float | None
    transferability: float | None

    def cells(self) -> list[str]:
        def fmt(v):
            return NA if v is None else repr(v)

        return [self.model, self.terrain.value, fmt(self.s_level3), fmt(self.s_level4),
                fmt(self.total), fmt(self.transferability)]


def cross_matrix(
    models: Mapping[str, "tuple[PolicyParams, StairKind] | None"],
    terrains: Iterable,
    levels: tuple[int, int] = (3, 4),
    n_episodes: int = 300,
    seed: int = 0,
    env_cfg: EnvConfig | None = None,
    evaluate: Callable[..., float] | None = None,
) -> list[TransferRow]:
    """Rows of (model, terrain) with level-3/4 success, their mean and transferability.

    ``models`` maps a name to ``(params, trained_kind)``, or ``None`` for a
    checkpoint that could not be loaded (its rows are marked absent).
    Transferability divides by the total of the model trained on that
    terrain; the diagonal and terrains without such a model are N/A.
    """
    terrains = [StairKind.parse(t) for t in terrains]
    if evaluate is None:
        def evaluate(params, kind, level):
            pol = network_policy(params)
            return success_rate(pol, kind, level, n_episodes, seed, Mode.TEST, env_cfg).success_rate

    totals: dict[tuple[str, StairKind], float] = {}
    rows = []
    for name, entry in models.items():
        for kind in terrains:
            if entry is None:
                rows.append(TransferRow(name, kind, None, None, None, None))
                continue
            params, _ = entry
            s3, s4 = (evaluate(params, kind, lvl) for lvl in levels)
            tot = total_success(s3, s4)
            totals[(name, kind)] = tot
            rows.append(TransferRow(name, kind, s3, s4, tot, None))
    own = {entry[1]: name for name, entry in models.items() if entry is not None}
    for row in rows:
        if row.total is None:
            continue
        trained = models[row.model][1]
        ref = own.get(row.terrain)
        if trained is row.terrain or ref is None or (ref, row.terrain) not in totals:
            continue
        row.transferability = transferability(row.total, totals[(ref, row.terrain)])
    return rows


def write_transfer_csv(path, rows: Sequence[TransferRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSFER_COLUMNS)
        for r in rows:
            w.writerow(r.cells())


# -- critic heatmap ----------------------------------------------------------


@dataclass
class Heatmap:
    values: np.ndarray  # (nx, ny), NaN where the lattice point is off the terrain
    spacing: float
    origin: tuple[float, float]
    yaw_mode: str

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.values.shape
        xs = self.origin[0] + self.spacing * np.arange(nx)
        ys = self.origin[1] + self.spacing * np.arange(ny)
        return np.meshgrid(xs, ys, indexing="ij")


def lattice_shape(hf: HeightField, spacing: float) -> tuple[int, int]:
    ex, ey = hf.extent
    # a tiny slack keeps exact multiples from rounding up
    return math.ceil(ex / spacing - 1e-9), math.ceil(ey / spacing - 1e-9)


def heatmap_observation(hf: HeightField, x: float, y: float, yaw: float, stand_height: float) -> np.ndarray:
    """Observation with zero velocities, nominal joints and zero last action at ``(x, y, yaw)``."""
    ix, iy = int(x // hf.cell_size), int(y // hf.cell_size)
    ground = float(hf.heights[ix, iy])
    z = ground + stand_height
    gx, gy, gz, gyaw = hf.goal_pose
    dx, dy = gx - x, gy - y
    c, s = math.cos(yaw), math.sin(yaw)
    obs = np.zeros(OBS_DIM)
    obs[OBS_SLICES["g_b"]] = GRAVITY_BODY
    obs[OBS_SLICES["joints"]] = NOMINAL_STANCE
    obs[OBS_SLICES["p_goal"]] = (c * dx + s * dy, -s * dx + c * dy, gz - ground, wrap_angle(gyaw - yaw))
    obs[OBS_SLICES["heightmap"]] = local_heightmap(hf, (x, y, z, yaw)).ravel()
    return obs


def critic_heatmap(
    params: PolicyParams,
    hf: HeightField,
    spacing: float = 0.1,
    yaw_mode: str = "face_goal",
    fixed_yaw: float = 0.0,
    stand_height: float | None = None,
    batch: int = 1024,
) -> Heatmap:
    """Critic value on an ``x-y`` lattice over the terrain; parameters are only read."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if yaw_mode not in ("face_goal", "fixed"):
        raise ValueError(f"unknown yaw mode {yaw_mode!r}")
    stand = EnvConfig().stand_height if stand_height is None else stand_height
    nx, ny = lattice_shape(hf, spacing)
    values = np.full((nx, ny), np.nan)
    gx, gy = hf.goal_pose[0], hf.goal_pose[1]
    todo, obs = [], []
    for i in range(nx):
        for j in range(ny):
            x, y = i * spacing, j * spacing
            ix, iy = int(x // hf.cell_size), int(y // hf.cell_size)
            if ix >= hf.nx or iy >= hf.ny or hf.heights[ix, iy] <= VOID_HEIGHT:
                continue
            if yaw_mode == "fixed":
                yaw = fixed_yaw
            elif math.hypot(gx - x, gy - y) < 1e-9:
                yaw = hf.goal_pose[3]
            else:
                yaw = math.atan2(gy - y, gx - x)
            todo.append((i, j))
            obs.append(heatmap_observation(hf, x, y, yaw, stand))
    if obs:
        obs = np.asarray(obs)
        v = np.concatenate([forward(params, obs[k : k + batch]).value for k in range(0, len(obs), batch)])
        ii, jj = np.array(todo).T
        values[ii, jj] = v
    return Heatmap(values, spacing, (0.0, 0.0), yaw_mode)


def goal_adjacent_mask(hf: HeightField, heat: Heatmap, radius: float = 0.5) -> np.ndarray:
    """Lattice points within the goal radius of the goal position."""
    px, py = heat.points()
    return (np.hypot(px - hf.goal_pose[0], py - hf.goal_pose[1]) <= radius) & np.isfinite(heat.values)


def wall_adjacent_mask(hf: HeightField, heat: Heatmap, radius: float | None = None, goal_radius: float = 0.5) -> np.ndarray:
    """Walkable lattice points within ``radius`` (default one lattice spacing) of a wall cell.

    Points on walls and points in the goal neighbourhood are excluded.
    """
    radius = heat.spacing if radius is None else radius
    dist = ndimage.distance_transform_edt(~hf.wall_mask) * hf.cell_size
    px, py = heat.points()
    ix = np.clip((px // hf.cell_size).astype(int), 0, hf.nx - 1)
    iy = np.clip((py // hf.cell_size).astype(int), 0, hf.ny - 1)
    on_wall = hf.wall_mask[ix, iy]
    near = (dist[ix, iy] <= radius) & ~on_wall
    return near & np.isfinite(heat.values) & ~goal_adjacent_mask(hf, heat, goal_radius)


def write_heatmap(heat: Heatmap, out_dir, stem: str, extra: Mapping | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path, meta_path = out / f"{stem}.csv", out / f"{stem}.pgm", out / f"{stem}.json"
    write_grid_csv(csv_path, heat.values, fmt="%.9g")
    scale = write_pgm16(pgm_path, heat.values)
    meta = {
        "origin": list(heat.origin),
        "spacing": heat.spacing,
        "shape": list(heat.values.shape),
        "yaw_mode": heat.yaw_mode,
        "value_scale": scale,
        **(dict(extra) if extra else {}),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return [csv_path, pgm_path, meta_path]
