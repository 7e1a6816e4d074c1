"""PPO on the vectorised surrogate: rollouts, GAE, clipped-surrogate updates, training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping

import numpy as np

from .curriculum import CurriculumState
from .env import N_JOINTS, StepEvent, TerrainBank, VecEnv
from .net import PolicyParams, backward, forward, load_checkpoint, log_prob_and_entropy, save_checkpoint
from .rewards import Stage

if TYPE_CHECKING:
    from .config import RunConfig

log = logging.getLogger(__name__)


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: float = 1.0
    entropy_coef: float = 0.005
    value_coef: float = 0.5
    rollout_steps: int = 48
    n_env: int = 256
    iterations: int = 300
    checkpoint_every: int = 50
    adv_eps: float = 1e-8

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if (self.rollout_steps * self.n_env) % self.minibatches:
            raise ValueError("rollout_steps * n_env must divide evenly into minibatches")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PpoConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown ppo config keys: {sorted(unknown)}")
        return cls(**dict(data))


def compute_gae(rewards, values, dones, bootstrap_value, gamma: float, lam: float):
    """Generalised advantage estimates over the leading (time) axis.

    ``dones[t]`` marks that the episode ended at step ``t``, cutting both the
    bootstrap and the advantage recursion.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError(f"shape mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    bootstrap_value = np.asarray(bootstrap_value, dtype=np.float64)
    if bootstrap_value.shape != rewards.shape[1:]:
        raise ValueError("bootstrap_value must match one time slice")
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    next_value = bootstrap_value
    for t in range(T - 1, -1, -1):
        notdone = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * notdone - values[t]
        last = delta + gamma * lam * notdone * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv, eps: float = 1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    centered = adv - adv.mean()
    centered -= centered.mean()  # second pass: a constant batch must map to exact zeros
    return centered / (centered.std() + eps)


@dataclass
class LossTerms:
    policy_loss: float
    value_loss: float
    entropy: float
    total: float
    clip_frac: float
    approx_kl: float


def ppo_loss(params: PolicyParams, obs, actions, logp_old, advantages, returns, cfg: PpoConfig, grad: bool = True):
    """Clipped-surrogate loss; ``advantages`` must already be normalised.

    Returns ``(LossTerms, grads)`` with ``grads`` None when ``grad`` is False.
    """
    if grad:
        out, trace = forward(params, obs, record=True)
    else:
        out, trace = forward(params, obs), None
    mean = out.action_mean.astype(np.float64)
    log_std = params["log_std"].astype(np.float64)
    std = np.exp(log_std)
    value = out.value.astype(np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    b = len(adv)

    logp, entropy = log_prob_and_entropy(mean, std, actions)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
    surr1, surr2 = ratio * adv, clipped * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((value - returns) ** 2)
    ent = float(np.mean(entropy))
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
    terms = LossTerms(
        policy_loss=float(policy_loss),
        value_loss=float(value_loss),
        entropy=ent,
        total=float(total),
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        approx_kl=float(np.mean(logp_old - logp)),
    )
    if not np.isfinite(total):
        raise FloatingPointError(
            f"non-finite PPO loss: policy={policy_loss} value={value_loss} entropy={ent} "
            f"max|ratio|={np.max(np.abs(ratio))} max|adv|={np.max(np.abs(adv))}"
        )
    if not grad:
        return terms, None

    # d/dlogp of -min(r A, clip(r) A); the clipped branch is flat outside the band
    unclipped = surr1 <= surr2
    inside = (ratio > 1.0 - cfg.clip) & (ratio < 1.0 + cfg.clip)
    d_logp = -np.where(unclipped | inside, ratio * adv, 0.0) / b
    z = (actions - mean) / std
    d_mean = d_logp[:, None] * z / std
    d_log_std = np.sum(d_logp[:, None] * (z**2 - 1.0), axis=0) - cfg.entropy_coef
    d_value = cfg.value_coef * 2.0 * (value - returns) / b
    grads = backward(params, trace, d_mean, d_value, d_log_std)
    return terms, grads


class Adam:
    """First-order adaptive-moment optimiser on a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, dtype=np.float32):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(params.dtype)


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    norm = float(np.sqrt(np.sum(grad.astype(np.float64) ** 2)))
    if max_norm > 0 and norm > max_norm:
        grad *= max_norm / (norm + 1e-12)
    return norm


@dataclass
class RolloutBatch:
    obs: np.ndarray  # (T, N, 490) float32
    actions: np.ndarray  # (T, N, 12)
    logp: np.ndarray  # (T, N)
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    events: np.ndarray
    bootstrap: np.ndarray  # (N,)


class Trainer:
    """Owns the env, curriculum, optimiser and all RNG streams of one run."""

    def __init__(self, cfg: "RunConfig", params: PolicyParams | None = None, workers: int = 1):
        self.cfg = cfg
        pc = cfg.ppo
        root = np.random.SeedSequence(cfg.seed)
        init_ss, noise_ss, env_ss, curr_ss, perm_ss = root.spawn(5)
        self.params = params.copy() if params is not None else PolicyParams.init(int(init_ss.generate_state(1)[0]))
        if self.params.dtype != np.float32:
            self.params = self.params.astype(np.float32)
        self.noise_rng = np.random.default_rng(noise_ss)
        self.perm_rng = np.random.default_rng(perm_ss)
        self.seed_rngs = [np.random.default_rng(s) for s in env_ss.spawn(pc.n_env)]
        cc = cfg.curriculum
        self.curriculum = CurriculumState(pc.n_env, np.random.default_rng(curr_ss), cc.start_level, cc.n_levels)
        self.kind = cfg.terrain.kind
        levels = range(1, cc.n_levels + 1) if cc.enabled else [cc.start_level]
        self.bank = TerrainBank.build([self.kind], "train", levels)
        self.env = VecEnv(self.bank, pc.n_env, cfg.env, cfg.rewards, workers)
        self.adam = Adam(self.params.flat.size, pc.lr, pc.adam_beta1, pc.adam_beta2, pc.adam_eps)
        self.ep_return = np.zeros(pc.n_env)
        self.obs = np.stack([self._reset(i) for i in range(pc.n_env)])

    def _reset(self, i: int) -> np.ndarray:
        seed = int(self.seed_rngs[i].integers(2**63))
        return self.env.reset(i, self.kind, int(self.curriculum.levels[i]), seed)

    def collect(self) -> tuple[RolloutBatch, dict[str, float]]:
        pc, env = self.cfg.ppo, self.env
        T, N = pc.rollout_steps, pc.n_env
        obs_buf = np.empty((T, N, self.obs.shape[1]), dtype=np.float32)
        act_buf = np.empty((T, N, N_JOINTS))
        logp_buf = np.empty((T, N))
        rew_buf = np.empty((T, N))
        val_buf = np.empty((T, N))
        done_buf = np.empty((T, N))
        ev_buf = np.empty((T, N), dtype=np.int64)
        finished_returns, outcomes = [], []
        slow = 0
        for t in range(T):
            out = forward(self.params, self.obs)
            mean = out.action_mean.astype(np.float64)
            std = out.action_std.astype(np.float64)
            action = mean + std * self.noise_rng.standard_normal((N, N_JOINTS))
            logp, _ = log_prob_and_entropy(mean, std, action)
            obs_buf[t] = self.obs
            act_buf[t] = action
            logp_buf[t] = logp
            val_buf[t] = out.value
            res = env.step(action)
            rew_buf[t] = res.reward
            ev_buf[t] = res.events
            done = res.events != StepEvent.RUNNING
            done_buf[t] = done
            slow += int(np.sum((res.speed < self.cfg.rewards.stall_speed_threshold) & ~res.in_goal_region))
            self.ep_return += res.reward
            next_obs = res.obs
            for i in np.flatnonzero(done):
                finished_returns.append(self.ep_return[i])
                outcomes.append(int(res.events[i]))
                self.ep_return[i] = 0.0
                if self.cfg.curriculum.enabled:
                    self.curriculum.apply(i, res.events[i])
                next_obs[i] = self._reset(i)
            self.obs = next_obs
        bootstrap = forward(self.params, self.obs).value.astype(np.float64)
        outcomes = np.array(outcomes, dtype=np.int64)
        stats = {
            "episodes": len(outcomes),
            "mean_return": float(np.mean(finished_returns)) if finished_returns else float("nan"),
            "success_rate": 100.0 * float(np.mean(outcomes == StepEvent.GOAL_REACHED)) if len(outcomes) else float("nan"),
            "fall_rate": 100.0 * float(np.mean(np.isin(outcomes, (StepEvent.FELL, StepEvent.OUT_OF_BOUNDS)))) if len(outcomes) else float("nan"),
            "stall_frac": slow / (T * N),
            "mean_reward": float(rew_buf.mean()),
        }
        batch = RolloutBatch(obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf, ev_buf, bootstrap)
        return batch, stats

    def update(self, batch: RolloutBatch) -> dict[str, float]:
        pc = self.cfg.ppo
        adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, pc.gamma, pc.gae_lambda)
        B = adv.size
        obs = batch.obs.reshape(B, -1)
        actions = batch.actions.reshape(B, N_JOINTS)
        logp_old = batch.logp.reshape(B)
        adv = normalize_advantages(adv.reshape(B), pc.adv_eps)
        ret = ret.reshape(B)
        mb = B // pc.minibatches
        acc: dict[str, float] = {}
        n = 0
        for _ in range(pc.epochs):
            perm = self.perm_rng.permutation(B)
            for k in range(pc.minibatches):
                idx = np.sort(perm[k * mb : (k + 1) * mb])
                terms, grads = ppo_loss(self.params, obs[idx], actions[idx], logp_old[idx], adv[idx], ret[idx], pc)
                gnorm = clip_grad_norm(grads.flat, pc.max_grad_norm)
                self.adam.step(self.params.flat, grads.flat)
                for key, val in (*asdict(terms).items(), ("grad_norm", gnorm)):
                    acc[key] = acc.get(key, 0.0) + val
                n += 1
        return {k: v / n for k, v in acc.items()}


METRIC_COLUMNS = [
    "iteration",
    "episodes",
    "mean_return",
    "success_rate",
    "fall_rate",
    "mean_level",
    "stall_frac",
    "mean_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "total_loss",
    "clip_frac",
    "approx_kl",
    "grad_norm",
]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def checkpoint_name(stage: Stage, iteration: int) -> str:
    return f"{stage.value}_iter{iteration:05d}"


def train(cfg: "RunConfig", out_dir=None, warm_start=None, workers: int = 1, progress=None) -> dict[str, Any]:
    """Run PPO for ``cfg.ppo.iterations`` and write checkpoints, ``metrics.csv`` and ``timing.csv``.

    Stage-2 runs warm-start from ``warm_start`` when given; a missing
    checkpoint only logs a warning and training starts from scratch.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = cfg.stage
    params = None
    if warm_start is not None:
        try:
            params, _ = load_checkpoint(warm_start)
        except FileNotFoundError:
            log.warning("warm-start checkpoint %s not found; training from scratch", warm_start)
    elif stage is Stage.STAGE2:
        log.warning("stage2 without a warm-start checkpoint; training from scratch")
    trainer = Trainer(cfg, params, workers)
    meta = {"stage": stage.value, "terrain_kind": trainer.kind.value, "seed": cfg.seed}
    ckpt_dir = out / "checkpoints"
    checkpoints = [save_checkpoint(ckpt_dir / checkpoint_name(stage, 0), trainer.params, {**meta, "iteration": 0})[0]]
    n_levels = cfg.curriculum.n_levels
    header = METRIC_COLUMNS + [f"level_{k}" for k in range(1, n_levels + 1)]
    rows = []
    timing = []
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh, open(out / "timing.csv", "w", newline="") as th:
        writer = csv.writer(fh, lineterminator="\n")
        twriter = csv.writer(th, lineterminator="\n")
        writer.writerow(header)
        twriter.writerow(["iteration", "wall_ms", "rollout_ms", "update_ms"])
        for it in range(1, cfg.ppo.iterations + 1):
            t0 = time.perf_counter()
            batch, stats = trainer.collect()
            t1 = time.perf_counter()
            losses = trainer.update(batch)
            t2 = time.perf_counter()
            hist = trainer.curriculum.histogram()
            row = {
                "iteration": it,
                **stats,
                "mean_level": float(trainer.curriculum.levels.mean()),
                **losses,
                "total_loss": losses["total"],
            }
            values = [_fmt(row[c]) for c in METRIC_COLUMNS] + [str(int(h)) for h in hist]
            writer.writerow(values)
            fh.flush()
            twriter.writerow([it, round(1000 * (t2 - t0)), round(1000 * (t1 - t0)), round(1000 * (t2 - t1))])
            th.flush()
            rows.append(row)
            timing.append(t2 - t0)
            if progress is not None:
                progress(row)
            if it % cfg.ppo.checkpoint_every == 0 or it == cfg.ppo.iterations:
                path = save_checkpoint(ckpt_dir / checkpoint_name(stage, it), trainer.params, {**meta, "iteration": it})
                checkpoints.append(path[0])
    final = save_checkpoint(ckpt_dir / f"{stage.value}_final", trainer.params, {**meta, "iteration": cfg.ppo.iterations})
    trainer.env.close()
    return {
        "params": trainer.params,
        "metrics": rows,
        "metrics_path": metrics_path,
        "checkpoints": checkpoints,
        "final_checkpoint": final[0],
        "seconds": float(np.sum(timing)),
    }
