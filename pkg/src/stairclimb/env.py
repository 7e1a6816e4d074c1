"""Reduced-order legged surrogate over stair heightfields, vectorised across envs.

The base glides at a fixed standing height above the terrain. Twelve joint
position commands drive a first-order joint lag (for the regularisation
terms) and, averaged in groups of four, the planar velocity command. Risers
can only be climbed fast enough, square enough and low enough; taller risers
carry a small chance of tripping.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .rewards import RewardConfig, Stage, nav_rewards, regularization, stage2_task, stall_penalty, total
from .terrain import (
    HEIGHTMAP_SIZE,
    VOID_HEIGHT,
    HeightField,
    Mode,
    StairKind,
    difficulty_to_spec,
    generate,
    heightmap_offsets,
    project_polyline,
    sample_height,
    wrap_angle,
)

OBS_DIM = 490
PROPRIO_DIM = 49
N_JOINTS = 12
NOMINAL_STANCE = np.tile([0.0, 0.4, -0.8], 4)
GRAVITY_BODY = np.array([0.0, 0.0, -1.0])

OBS_SLICES = {
    "v_b": slice(0, 3),
    "omega_b": slice(3, 6),
    "g_b": slice(6, 9),
    "joints": slice(9, 21),
    "joint_vel": slice(21, 33),
    "last_action": slice(33, 45),
    "p_goal": slice(45, 49),
    "heightmap": slice(49, 490),
}


class StepEvent(enum.IntEnum):
    RUNNING = 0
    GOAL_REACHED = 1
    FELL = 2
    OUT_OF_BOUNDS = 3
    TIMEOUT = 4

    @property
    def terminal(self) -> bool:
        return self is not StepEvent.RUNNING


@dataclass
class EnvConfig:
    dt: float = 0.05
    timeout_steps: int = 400
    stand_height: float = 0.35
    v_max: float = 1.0
    v_lat_max: float = 0.4
    omega_max: float = 1.5
    tau_joint: float = 0.2
    kp: float = 20.0
    kd: float = 0.5
    climb_max: float = 0.22
    climb_min_speed: float = 0.2
    climb_max_heading_deg: float = 30.0
    drop_max: float = 0.45
    wall_clearance: float = 0.5
    goal_radius: float = 0.5
    goal_yaw_tol: float = 0.5
    spawn_jitter_pos: float = 0.1
    spawn_jitter_yaw: float = 0.1
    trip_prob_max: float = 0.1
    trip_height_lo: float = 0.08

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EnvConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown env config keys: {sorted(unknown)}")
        return cls(**dict(data))


def action_to_command(a, cfg: EnvConfig | None = None):
    """Map 12 joint commands to ``(vx, vy, yaw_rate)`` through group means and tanh."""
    cfg = cfg or EnvConfig()
    a = np.clip(np.asarray(a, dtype=float), -1.0, 1.0)
    vx = cfg.v_max * np.tanh(a[..., 0:4].mean(axis=-1))
    vy = cfg.v_lat_max * np.tanh(a[..., 4:8].mean(axis=-1))
    wz = cfg.omega_max * np.tanh(a[..., 8:12].mean(axis=-1))
    return vx, vy, wz


def joint_dynamics(joints, joint_vel, a, dt: float, cfg: EnvConfig | None = None):
    """First-order lag toward the commanded positions; returns ``(joints', joint_vel', torque)``.

    ``joint_vel`` (the previous velocity) is unused by the lag itself.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or EnvConfig()
    joints = np.asarray(joints, dtype=float)
    err = np.asarray(a, dtype=float) - joints
    vel = err / cfg.tau_joint
    new_joints = joints + vel * dt
    torque = cfg.kp * err - cfg.kd * vel
    return new_joints, vel, torque


def trip_probability(dh, cfg: EnvConfig):
    frac = np.clip((dh - cfg.trip_height_lo) / (cfg.climb_max - cfg.trip_height_lo), 0.0, 1.0)
    return cfg.trip_prob_max * frac**2


def transition(x, y, yaw, vx, vy, wz, sample, ascent, dt: float, cfg: EnvConfig, trip_u=None):
    """Vectorised surrogate move. ``sample(x, y)`` gives heights, ``ascent(x, y)`` unit climb directions.

    Returns ``(x', y', yaw', blocked, fell, out_of_bounds)``.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    cx = x + (c * vx - s * vy) * dt
    cy = y + (s * vx + c * vy) * dt
    h0 = sample(x, y)
    h1 = sample(cx, cy)
    dh = h1 - h0
    oob = h1 <= VOID_HEIGHT
    wall = (h1 - (h0 + cfg.stand_height)) > cfg.wall_clearance
    ax, ay = ascent(x, y)
    heading_ok = (c * ax + s * ay) >= math.cos(math.radians(cfg.climb_max_heading_deg)) - 1e-12
    speed = np.hypot(vx, vy)
    climbing = dh > 0
    climb_ok = (dh <= cfg.climb_max) & (speed >= cfg.climb_min_speed) & heading_ok
    blocked = ~oob & (wall | (climbing & ~climb_ok))
    fell = oob | (~blocked & (dh < -cfg.drop_max))
    if trip_u is not None:
        fell = fell | (~blocked & climbing & (trip_u < trip_probability(dh, cfg)))
    nx = np.where(blocked, x, cx)
    ny = np.where(blocked, y, cy)
    return nx, ny, yaw + wz * dt, blocked, fell, oob


def terrain_transition(pos, yaw, cmd, hf: HeightField, dt: float, cfg: EnvConfig | None = None, trip_u=None):
    """Single-heightfield convenience wrapper around :func:`transition`."""
    cfg = cfg or EnvConfig()

    def ascent(px, py):
        ix = np.clip(np.floor(np.asarray(px) / hf.cell_size).astype(int), 0, hf.nx - 1)
        iy = np.clip(np.floor(np.asarray(py) / hf.cell_size).astype(int), 0, hf.ny - 1)
        d = hf.ascent_dir[ix, iy]
        return d[..., 0], d[..., 1]

    vx, vy, wz = cmd
    out = transition(
        np.asarray(pos[0], float), np.asarray(pos[1], float), np.asarray(yaw, float),
        np.asarray(vx, float), np.asarray(vy, float), np.asarray(wz, float),
        lambda px, py: sample_height(hf, px, py), ascent, dt, cfg, trip_u,
    )
    nx, ny, nyaw, blocked, fell, oob = out
    return (float(nx), float(ny), float(nyaw)), bool(blocked), bool(fell)


class TerrainBank:
    """Heightfields keyed by ``(kind, mode, level)``, stacked for batched lookup.

    Grids are padded with the void height, so padding reads as off-grid.
    """

    def __init__(self, fields_: Mapping[tuple[StairKind, Mode, int], HeightField]):
        if not fields_:
            raise ValueError("empty terrain bank")
        self.keys = list(fields_)
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.fields = [fields_[k] for k in self.keys]
        cells = {hf.cell_size for hf in self.fields}
        if len(cells) != 1:
            raise ValueError("all heightfields in a bank must share a cell size")
        self.cell_size = cells.pop()
        nx = max(hf.nx for hf in self.fields)
        ny = max(hf.ny for hf in self.fields)
        k = len(self.fields)
        self.heights = np.full((k, nx, ny), VOID_HEIGHT)
        self.ascent = np.zeros((k, nx, ny, 2))
        self.ascent[..., 0] = 1.0
        for i, hf in enumerate(self.fields):
            self.heights[i, : hf.nx, : hf.ny] = hf.heights
            self.ascent[i, : hf.nx, : hf.ny] = hf.ascent_dir
        self.goal = np.array([hf.goal_pose for hf in self.fields])
        self.spawn = np.array([hf.spawn_pose for hf in self.fields])
        self.width = np.array([hf.spec.stair_width for hf in self.fields])
        self.d_far = np.array(
            [
                math.dist((hf.spawn_pose[0], hf.spawn_pose[1], 0.0), hf.goal_pose[:3])
                for hf in self.fields
            ]
        )
        self.nx, self.ny = nx, ny

    @classmethod
    def build(
        cls,
        kinds: Iterable["StairKind | str"],
        mode: "Mode | str" = Mode.TRAIN,
        levels: Iterable[int] | None = None,
    ) -> "TerrainBank":
        mode = Mode(mode)
        if levels is None:
            levels = range(1, 11 if mode is Mode.TRAIN else 7)
        levels = list(levels)
        out = {}
        for kind in kinds:
            kind = StairKind.parse(kind)
            for lvl in levels:
                out[(kind, mode, lvl)] = generate(difficulty_to_spec(kind, lvl, mode))
        return cls(out)

    def terrain_index(self, kind, level: int, mode: "Mode | str | None" = None) -> int:
        kind = StairKind.parse(kind)
        modes = [Mode(mode)] if mode is not None else [Mode.TRAIN, Mode.TEST]
        for m in modes:
            if (kind, m, int(level)) in self.index:
                return self.index[(kind, m, int(level))]
        raise KeyError(f"unknown terrain {kind.value!r} level {level}")

    def sample(self, tid, x, y):
        return kernels.sample_heights(self.heights, self.cell_size, tid, x, y)

    def ascent_dir(self, tid, x, y):
        c = self.cell_size
        ix = np.clip(np.floor(x / c).astype(np.int64), 0, self.nx - 1)
        iy = np.clip(np.floor(y / c).astype(np.int64), 0, self.ny - 1)
        d = self.ascent[tid, ix, iy]
        return d[..., 0], d[..., 1]

    def progress(self, tid: np.ndarray, x: np.ndarray, y: np.ndarray):
        s = np.empty_like(x)
        lat = np.empty_like(x)
        for t in np.unique(tid):
            m = tid == t
            hf = self.fields[t]
            s[m], lat[m] = project_polyline(hf.centerline, hf.arclength, x[m], y[m])
        return s, lat


@dataclass
class StepResult:
    obs: np.ndarray
    reward: np.ndarray
    terms: dict[str, np.ndarray]
    events: np.ndarray
    speed: np.ndarray
    in_goal_region: np.ndarray


class VecEnv:
    """``n_envs`` independent surrogate robots sharing a :class:`TerrainBank`.

    Each env owns a PCG64 stream seeded at reset, so trajectories depend only
    on (reset seed, action stream) and never on ``workers``.
    """

    def __init__(
        self,
        bank: TerrainBank,
        n_envs: int,
        cfg: EnvConfig | None = None,
        reward_cfg: RewardConfig | None = None,
        workers: int = 1,
    ):
        self.bank = bank
        self.n = int(n_envs)
        self.cfg = cfg or EnvConfig()
        self.reward_cfg = reward_cfg or RewardConfig()
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None
        n = self.n
        self.pos = np.zeros((n, 3))
        self.yaw = np.zeros(n)
        self.v_b = np.zeros((n, 3))
        self.yaw_rate = np.zeros(n)
        self.joints = np.tile(NOMINAL_STANCE, (n, 1))
        self.joint_vel = np.zeros((n, N_JOINTS))
        self.last_action = np.zeros((n, N_JOINTS))
        self.step_count = np.zeros(n, dtype=np.int64)
        self.tid = np.zeros(n, dtype=np.int64)
        self.level = np.ones(n, dtype=np.int64)
        self.s_prev = np.zeros(n)
        self.rngs: list[np.random.Generator] = [np.random.default_rng(0) for _ in range(n)]
        self.live = np.zeros(n, dtype=bool)
        self._fwd, self._left = heightmap_offsets()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -- reset -------------------------------------------------------------
    def reset(self, env_id: int, terrain_id, level: int, seed: int, mode=None) -> np.ndarray:
        tid = self.bank.terrain_index(terrain_id, level, mode)
        rng = np.random.default_rng(seed)
        jit = rng.uniform(-1.0, 1.0, 3)
        sx, sy, syaw = self.bank.spawn[tid]
        x = sx + self.cfg.spawn_jitter_pos * jit[0]
        y = sy + self.cfg.spawn_jitter_pos * jit[1]
        i = env_id
        self.rngs[i] = rng
        self.tid[i] = tid
        self.level[i] = level
        self.yaw[i] = syaw + self.cfg.spawn_jitter_yaw * jit[2]
        ground = self.bank.sample(np.array([tid]), np.array([x]), np.array([y]))[0]
        self.pos[i] = (x, y, ground + self.cfg.stand_height)
        self.v_b[i] = 0.0
        self.yaw_rate[i] = 0.0
        self.joints[i] = NOMINAL_STANCE
        self.joint_vel[i] = 0.0
        self.last_action[i] = 0.0
        self.step_count[i] = 0
        self.live[i] = True
        s, _ = self.bank.progress(np.array([tid]), np.array([x]), np.array([y]))
        self.s_prev[i] = s[0]
        return self.observe(np.array([i]))[0]

    # -- observation ---------------------------------------------------------
    def heightmaps(self, idx: np.ndarray) -> np.ndarray:
        x, y, z = self.pos[idx, 0], self.pos[idx, 1], self.pos[idx, 2]
        c, s = np.cos(self.yaw[idx])[:, None], np.sin(self.yaw[idx])[:, None]
        px = x[:, None] + c * self._fwd - s * self._left
        py = y[:, None] + s * self._fwd + c * self._left
        tid = np.broadcast_to(self.tid[idx][:, None], px.shape)
        return self.bank.sample(tid, px, py) - z[:, None]

    def observe(self, idx: np.ndarray | None = None) -> np.ndarray:
        if idx is None:
            idx = np.arange(self.n)
        obs = np.empty((len(idx), OBS_DIM))
        obs[:, OBS_SLICES["v_b"]] = self.v_b[idx]
        obs[:, 3:5] = 0.0
        obs[:, 5] = self.yaw_rate[idx]
        obs[:, OBS_SLICES["g_b"]] = GRAVITY_BODY
        obs[:, OBS_SLICES["joints"]] = self.joints[idx]
        obs[:, OBS_SLICES["joint_vel"]] = self.joint_vel[idx]
        obs[:, OBS_SLICES["last_action"]] = self.last_action[idx]
        obs[:, OBS_SLICES["p_goal"]] = self.goal_in_body(idx)
        obs[:, OBS_SLICES["heightmap"]] = self.heightmaps(idx)
        return obs

    def goal_in_body(self, idx: np.ndarray) -> np.ndarray:
        goal = self.bank.goal[self.tid[idx]]
        dx = goal[:, 0] - self.pos[idx, 0]
        dy = goal[:, 1] - self.pos[idx, 1]
        c, s = np.cos(self.yaw[idx]), np.sin(self.yaw[idx])
        ground = self.pos[idx, 2] - self.cfg.stand_height
        return np.stack(
            [c * dx + s * dy, -s * dx + c * dy, goal[:, 2] - ground, wrap_angle(goal[:, 3] - self.yaw[idx])],
            axis=-1,
        )

    # -- step ----------------------------------------------------------------
    def step(self, actions: np.ndarray) -> StepResult:
        actions = np.asarray(actions, dtype=float)
        if actions.shape != (self.n, N_JOINTS):
            raise ValueError(f"expected actions of shape {(self.n, N_JOINTS)}, got {actions.shape}")
        obs = np.empty((self.n, OBS_DIM))
        reward = np.empty(self.n)
        events = np.empty(self.n, dtype=np.int64)
        speed = np.empty(self.n)
        in_goal = np.empty(self.n, dtype=bool)
        terms: dict[str, np.ndarray] = {}
        # draws happen up front, in env order, so worker chunking cannot reorder them
        trip_u = np.array([rng.random() for rng in self.rngs])

        def run(sl: slice):
            idx = np.arange(self.n)[sl]
            o, r, t, e, sp, g = self._step_idx(idx, actions[sl], trip_u[sl])
            obs[sl], reward[sl], events[sl], speed[sl], in_goal[sl] = o, r, e, sp, g
            return sl, t

        if self._pool is None or self.n < 2 * self.workers:
            parts = [run(slice(0, self.n))]
        else:
            bounds = np.linspace(0, self.n, self.workers + 1).astype(int)
            parts = list(self._pool.map(run, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
        for sl, t in parts:
            for k, v in t.items():
                terms.setdefault(k, np.empty(self.n))[sl] = v
        return StepResult(obs, reward, terms, events, speed, in_goal)

    def _step_idx(self, idx, actions, trip_u):
        cfg, rc = self.cfg, self.reward_cfg
        dt = cfg.dt
        tid = self.tid[idx]
        a = np.clip(actions, -1.0, 1.0)
        joints, jvel, torque = joint_dynamics(self.joints[idx], self.joint_vel[idx], a, dt, cfg)
        jacc = (jvel - self.joint_vel[idx]) / dt
        vx, vy, wz = action_to_command(a, cfg)
        x0, y0, yaw0 = self.pos[idx, 0], self.pos[idx, 1], self.yaw[idx]

        def sample(px, py):
            return self.bank.sample(tid, px, py)

        def ascent(px, py):
            return self.bank.ascent_dir(tid, px, py)

        x1, y1, yaw1, blocked, fell, oob = transition(x0, y0, yaw0, vx, vy, wz, sample, ascent, dt, cfg, trip_u)
        ground = sample(x1, y1)
        z1 = np.where(oob, self.pos[idx, 2], ground + cfg.stand_height)
        dx, dy, dz = x1 - x0, y1 - y0, z1 - self.pos[idx, 2]
        c, s = np.cos(yaw1), np.sin(yaw1)
        v_b = np.stack([(c * dx + s * dy) / dt, (-s * dx + c * dy) / dt, dz / dt], axis=-1)
        speed = np.hypot(dx, dy) / dt

        self.pos[idx] = np.stack([x1, y1, z1], axis=-1)
        self.yaw[idx] = yaw1
        self.v_b[idx] = v_b
        self.yaw_rate[idx] = wz
        prev_action = self.last_action[idx]
        self.joints[idx] = joints
        self.joint_vel[idx] = jvel
        self.last_action[idx] = a
        self.step_count[idx] += 1

        goal = self.bank.goal[tid]
        dist_h = np.hypot(goal[:, 0] - x1, goal[:, 1] - y1)
        yaw_err = wrap_angle(goal[:, 3] - yaw1)
        in_goal = dist_h <= cfg.goal_radius
        reached = in_goal & (np.abs(yaw_err) <= cfg.goal_yaw_tol) & ~fell
        events = np.full(len(idx), int(StepEvent.RUNNING))
        events[self.step_count[idx] >= cfg.timeout_steps] = StepEvent.TIMEOUT
        events[reached] = StepEvent.GOAL_REACHED
        events[fell] = StepEvent.FELL
        events[oob] = StepEvent.OUT_OF_BOUNDS
        self.live[idx] = events == StepEvent.RUNNING

        raw = regularization(torque, jvel, jacc, a, prev_action, joints, rc.joint_limit)
        raw["goal"] = reached.astype(float)
        raw["stall"] = stall_penalty(speed, in_goal, rc)
        if rc.stage is Stage.STAGE1:
            dist = np.sqrt(dist_h**2 + (goal[:, 2] - (z1 - cfg.stand_height)) ** 2)
            raw["nav_far"], raw["nav_near"] = nav_rewards(dist, self.bank.d_far[tid], rc.sigma_near)
        else:
            s_now, lateral = self.bank.progress(tid, x1, y1)
            raw["path"], raw["centering"] = stage2_task(
                s_now - self.s_prev[idx], lateral, self.bank.width[tid] / 4, rc.path_clip
            )
            self.s_prev[idx] = s_now
        terms = total(raw, rc)
        logged = dict(terms.terms)
        logged["task"], logged["penalties"] = terms.task, terms.penalties
        return self.observe(idx), terms.total, logged, events, speed, in_goal


def trajectory_rows(env: VecEnv, i: int, t: int, speed: float, event: int) -> list:
    x, y, z = env.pos[i]
    return [t, x, y, z, env.yaw[i], speed, StepEvent(event).name.lower()]


TRAJECTORY_HEADER = ["t", "x", "y", "z", "yaw", "speed", "event"]


def scripted_walker(env: VecEnv, gain: float = 2.0) -> np.ndarray:
    """Hand-written controller: steer toward the next centerline point and walk forward.

    Serves as the oracle policy in tests; never used for training.
    """
    idx = np.arange(env.n)
    actions = np.zeros((env.n, N_JOINTS))
    x, y, yaw = env.pos[:, 0], env.pos[:, 1], env.yaw
    tx = np.empty(env.n)
    ty = np.empty(env.n)
    for t in np.unique(env.tid):
        m = env.tid == t
        hf = env.bank.fields[t]
        s, _ = project_polyline(hf.centerline, hf.arclength, x[m], y[m])
        s_look = np.minimum(s + 0.5, hf.arclength[-1])
        tx[m] = np.interp(s_look, hf.arclength, hf.centerline[:, 0])
        ty[m] = np.interp(s_look, hf.arclength, hf.centerline[:, 1])
    goal = env.bank.goal[env.tid]
    near = np.hypot(goal[:, 0] - x, goal[:, 1] - y) < 0.6
    heading = np.where(near, goal[:, 3], np.arctan2(ty - y, tx - x))
    err = wrap_angle(heading - yaw)
    actions[idx, 0:4] = np.where(np.abs(err) < 0.4, 1.0, 0.35)[:, None]
    actions[idx, 8:12] = np.clip(gain * err, -1.0, 1.0)[:, None]
    return actions
