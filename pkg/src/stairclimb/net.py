"""Actor-critic with a shared CNN terrain encoder and hand-written reverse mode.

Data flow for a batch of 490-d observations::

    heightmap 21x21x1 -conv3x3(8)-ELU-pool-> 10x10x8 -conv3x3(16)-ELU-pool-> 5x5x16
        -> flatten 400 -dense-ELU-> latent 128
    trunk = [proprio 49, latent 128]                          (177)
    actor:  177 -128-128-64-> 12 action means (+ state-free log_std)
    critic: 177 -128-128-64-> 1 value

Parameters live in one flat array; every named block is a view into it, so
optimisers and checkpoints work on the flat vector. Computation runs in the
dtype of the parameters (float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import kernels
from .env import OBS_DIM, PROPRIO_DIM

HM = 21
LATENT = 128
N_ACT = 12
HIDDEN = (128, 128, 64)
TRUNK = PROPRIO_DIM + LATENT

CHECKPOINT_FORMAT = "stairclimb-checkpoint"
CHECKPOINT_VERSION = 1

# fixed input conditioning, not learned
PROPRIO_SCALE = np.concatenate(
    [np.ones(9), np.ones(12), np.full(12, 0.1), np.ones(12), [0.2, 0.2, 1.0, 1.0]]
)
HEIGHTMAP_CLIP = 2.0


def _mlp_layout(prefix: str, out: int):
    dims = (TRUNK, *HIDDEN, out)
    layout = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layout += [(f"{prefix}.{i}.w", (a, b)), (f"{prefix}.{i}.b", (b,))]
    return layout


LAYOUT: list[tuple[str, tuple[int, ...]]] = [
    ("conv1.w", (3, 3, 1, 8)),
    ("conv1.b", (8,)),
    ("conv2.w", (3, 3, 8, 16)),
    ("conv2.b", (16,)),
    ("enc.w", (400, LATENT)),
    ("enc.b", (LATENT,)),
    *_mlp_layout("actor", N_ACT),
    *_mlp_layout("critic", 1),
    ("log_std", (N_ACT,)),
]
PARAM_COUNT = sum(math.prod(s) for _, s in LAYOUT)
ENCODER_BLOCKS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b", "enc.w", "enc.b")


class PolicyParams:
    """Flat parameter vector with named views."""

    def __init__(self, flat: np.ndarray):
        if flat.shape != (PARAM_COUNT,):
            raise ValueError(f"expected {PARAM_COUNT} parameters, got {flat.shape}")
        self.flat = flat
        self.views: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in LAYOUT:
            n = math.prod(shape)
            self.views[name] = flat[off : off + n].reshape(shape)
            off += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __iter__(self):
        return iter(self.views)

    @property
    def dtype(self):
        return self.flat.dtype

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.flat.copy())

    def astype(self, dtype) -> "PolicyParams":
        return PolicyParams(self.flat.astype(dtype))

    @classmethod
    def zeros(cls, dtype=np.float32) -> "PolicyParams":
        return cls(np.zeros(PARAM_COUNT, dtype=dtype))

    @classmethod
    def init(cls, seed: int, dtype=np.float32, log_std: float = math.log(0.5)) -> "PolicyParams":
        rng = np.random.default_rng(seed)
        p = cls.zeros(np.float64)
        for conv in ("conv1.w", "conv2.w"):
            w = p[conv]
            fan_in = w.shape[0] * w.shape[1] * w.shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            w[...] = rng.uniform(-bound, bound, w.shape)
        p["enc.w"][...] = _orthogonal(rng, p["enc.w"].shape, math.sqrt(2))
        for head, out_gain in (("actor", 0.01), ("critic", 1.0)):
            for i in range(4):
                w = p[f"{head}.{i}.w"]
                w[...] = _orthogonal(rng, w.shape, out_gain if i == 3 else math.sqrt(2))
        p["log_std"][...] = log_std
        return p.astype(dtype)


def _orthogonal(rng: np.random.Generator, shape, gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


elu = kernels.elu


@dataclass
class NetOutput:
    action_mean: np.ndarray
    action_std: np.ndarray
    value: np.ndarray


@dataclass
class Trace:
    """Intermediates kept by :func:`forward` for :func:`backward`."""

    batch: int
    x: np.ndarray
    p1: np.ndarray
    arg1: np.ndarray
    cols2: np.ndarray
    arg2: np.ndarray
    flat: np.ndarray
    trunk: np.ndarray
    actor: list
    critic: list


def encode(params: PolicyParams, heightmap: np.ndarray, trace: dict | None = None) -> np.ndarray:
    """Map ``(B, 21, 21)`` (or ``(21, 21)``) height maps to ``(B, 128)`` latents."""
    hm = np.asarray(heightmap)
    single = hm.ndim == 2
    if single:
        hm = hm[None]
    if not np.all(np.isfinite(hm)):
        raise ValueError("heightmap contains non-finite values")
    dt = params.dtype
    b = hm.shape[0]
    x = np.clip(hm.astype(dt, copy=False), -HEIGHTMAP_CLIP, HEIGHTMAP_CLIP)
    # ELU is strictly increasing, so pooling before the activation selects the
    # same element and the activation runs on a quarter of the values
    m1, arg1 = kernels.conv3x3_maxpool(x, params["conv1.w"].reshape(9, 8), params["conv1.b"])
    p1 = elu(m1)
    cols2 = kernels.im2col3x3(p1)
    # a per-channel bias commutes with the max, so it is added after pooling
    m2, arg2 = kernels.maxpool2x2(cols2 @ params["conv2.w"].reshape(72, 16))
    flat = elu(m2 + params["conv2.b"]).reshape(b, 400)
    z3 = flat @ params["enc.w"] + params["enc.b"]
    latent = elu(z3)
    if trace is not None:
        trace.update(x=x, p1=p1, arg1=arg1, cols2=cols2, arg2=arg2, flat=flat)
    return latent[0] if single else latent


def _mlp(params: PolicyParams, prefix: str, x: np.ndarray, keep: list | None):
    h = x
    for i in range(4):
        if keep is not None:
            keep.append(h)
        z = h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
        h = elu(z) if i < 3 else z
    return h


def forward(params: PolicyParams, obs: np.ndarray, record: bool = False):
    """Evaluate both heads. Returns ``NetOutput`` or ``(NetOutput, Trace)`` when ``record``."""
    obs = np.asarray(obs)
    if obs.ndim == 1:
        obs = obs[None]
    if obs.shape[-1] != OBS_DIM:
        raise ValueError(f"observation must have {OBS_DIM} entries, got {obs.shape[-1]}")
    dt = params.dtype
    b = obs.shape[0]
    enc_trace: dict | None = {} if record else None
    latent = encode(params, obs[:, PROPRIO_DIM:].reshape(b, HM, HM), enc_trace)
    proprio = obs[:, :PROPRIO_DIM].astype(dt, copy=False) * PROPRIO_SCALE.astype(dt)
    trunk = np.concatenate([proprio, latent], axis=1)
    actor_keep: list | None = [] if record else None
    critic_keep: list | None = [] if record else None
    mean = _mlp(params, "actor", trunk, actor_keep)
    value = _mlp(params, "critic", trunk, critic_keep)[:, 0]
    out = NetOutput(mean, np.exp(params["log_std"]), value)
    if not record:
        return out
    return out, Trace(batch=b, trunk=trunk, actor=actor_keep, critic=critic_keep, **enc_trace)


def _mlp_backward(params, grads, prefix, keep, dout):
    d = dout
    for i in range(3, -1, -1):
        h = keep[i]
        if i < 3:
            d = kernels.elu_backward(d, keep[i + 1])
        grads[f"{prefix}.{i}.w"][...] = h.T @ d
        grads[f"{prefix}.{i}.b"][...] = d.sum(axis=0)
        d = d @ params[f"{prefix}.{i}.w"].T
    return d


def backward(params: PolicyParams, trace: Trace | None, d_mean, d_value, d_log_std) -> PolicyParams:
    """Exact gradients of a scalar loss given its partials w.r.t. the network outputs.

    The encoder gradient is the sum of the actor-path and critic-path contributions.
    """
    if trace is None:
        raise RuntimeError("backward called without a recorded forward pass")
    dt = params.dtype
    b = trace.batch
    grads = PolicyParams.zeros(dt)
    d_trunk = _mlp_backward(params, grads, "actor", trace.actor, np.asarray(d_mean, dtype=dt))
    d_trunk = d_trunk + _mlp_backward(
        params, grads, "critic", trace.critic, np.asarray(d_value, dtype=dt).reshape(b, 1)
    )
    grads["log_std"][...] = d_log_std

    dz3 = kernels.elu_backward(d_trunk[:, PROPRIO_DIM:], trace.trunk[:, PROPRIO_DIM:])
    grads["enc.w"][...] = trace.flat.T @ dz3
    grads["enc.b"][...] = dz3.sum(axis=0)
    dm2 = kernels.elu_backward(dz3 @ params["enc.w"].T, trace.flat).reshape(b, 5, 5, 16)
    grads["conv2.b"][...] = dm2.sum(axis=(0, 1, 2))
    dz2 = kernels.maxpool2x2_backward(dm2, trace.arg2, 10, 10)
    grads["conv2.w"][...] = (trace.cols2.reshape(-1, 72).T @ dz2.reshape(-1, 16)).reshape(3, 3, 8, 16)
    dp1 = kernels.col2im3x3(dz2 @ params["conv2.w"].reshape(72, 16).T, 8)
    dw1, db1 = kernels.conv3x3_maxpool_wgrad(trace.x, trace.arg1, kernels.elu_backward(dp1, trace.p1))
    grads["conv1.w"][...] = dw1.reshape(3, 3, 1, 8)
    grads["conv1.b"][...] = db1
    return grads


LOG_2PI = math.log(2 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2 * math.pi * math.e)


def log_prob_and_entropy(mean, std, action):
    """Diagonal-Gaussian log density (summed over the last axis) and entropy."""
    mean, std, action = np.asarray(mean), np.asarray(std), np.asarray(action)
    if np.any(std <= 0):
        raise ValueError("std must be positive")
    z = (action - mean) / std
    logp = -0.5 * np.sum(z**2, axis=-1) - np.sum(np.log(std) * np.ones_like(z), axis=-1) - 0.5 * LOG_2PI * z.shape[-1]
    entropy = np.sum(HALF_LOG_2PIE + np.log(std), axis=-1)
    return logp, entropy


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: PolicyParams, meta: dict[str, Any] | None = None) -> tuple[Path, Path]:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32)."""
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    data = params.flat.astype("<f4")
    layers, off = [], 0
    for name, shape in LAYOUT:
        n = math.prod(shape)
        layers.append({"name": name, "shape": list(shape), "offset": off * 4, "count": n})
        off += n
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "<f4",
        "param_count": PARAM_COUNT,
        "data_file": path.name + ".bin",
        "layers": layers,
        **(meta or {}),
    }
    bin_path = path.parent / (path.name + ".bin")
    json_path = path.parent / (path.name + ".json")
    bin_path.write_bytes(data.tobytes())
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json_path, bin_path


def load_checkpoint(path) -> tuple[PolicyParams, dict[str, Any]]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    json_path = path.parent / (path.name + ".json")
    manifest = json.loads(json_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{json_path}: not a {CHECKPOINT_FORMAT} manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{json_path}: unsupported checkpoint version {manifest.get('version')}")
    expected = {name: list(shape) for name, shape in LAYOUT}
    got = {layer["name"]: layer["shape"] for layer in manifest["layers"]}
    if got != expected:
        raise ValueError(f"{json_path}: layer shapes do not match this network")
    raw = (json_path.parent / manifest["data_file"]).read_bytes()
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if flat.size != PARAM_COUNT:
        raise ValueError(f"{json_path}: data holds {flat.size} values, expected {PARAM_COUNT}")
    for layer in manifest["layers"]:
        if layer["offset"] % 4 or layer["offset"] // 4 + layer["count"] > PARAM_COUNT:
            raise ValueError(f"{json_path}: bad offset for {layer['name']}")
    return PolicyParams(flat), manifest
