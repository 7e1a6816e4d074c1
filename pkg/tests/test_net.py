import math

import numpy as np
import pytest
from helpers import gradient_check
from hypothesis import given, settings
from hypothesis import strategies as st

from stairclimb import net
from stairclimb.net import (
    LAYOUT,
    PARAM_COUNT,
    PolicyParams,
    encode,
    forward,
    load_checkpoint,
    log_prob_and_entropy,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def params():
    return PolicyParams.init(0)


def _obs(seed, b=3):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, net.OBS_DIM)).astype(np.float32)


def test_layout_shapes():
    shapes = dict(LAYOUT)
    assert shapes["conv1.w"] == (3, 3, 1, 8)
    assert shapes["conv2.w"] == (3, 3, 8, 16)
    assert shapes["enc.w"] == (400, 128)
    assert [shapes[f"actor.{i}.w"] for i in range(4)] == [(177, 128), (128, 128), (128, 64), (64, 12)]
    assert shapes["critic.3.w"] == (64, 1)
    assert shapes["log_std"] == (12,)
    assert PARAM_COUNT == sum(math.prod(s) for s in shapes.values())


def test_shape_chain(params):
    trace = {}
    latent = encode(params, np.zeros((2, 21, 21), np.float32), trace)
    assert trace["p1"].shape == (2, 10, 10, 8)
    assert trace["cols2"].shape == (2, 10, 10, 72)
    assert trace["flat"].shape == (2, 400)
    assert latent.shape == (2, 128)
    assert encode(params, np.zeros((21, 21), np.float32)).shape == (128,)


def test_zero_input_zero_latent():
    p = PolicyParams.init(1)
    for name in ("conv1.b", "conv2.b", "enc.b"):
        p[name][...] = 0
    assert not encode(p, np.zeros((21, 21), np.float32)).any()


def test_forward_pure(params):
    obs = _obs(1)
    a, b = forward(params, obs), forward(params, obs)
    assert np.array_equal(a.action_mean, b.action_mean)
    assert np.array_equal(a.value, b.value)
    assert a.action_mean.shape == (3, 12) and a.value.shape == (3,)


def test_unit_std():
    p = PolicyParams.init(2)
    p["log_std"][...] = 0
    assert np.array_equal(forward(p, _obs(2)).action_std, np.ones(12, np.float32))


def test_heads_independent(params):
    obs = _obs(3)
    base = forward(params, obs)
    p = params.copy()
    p["critic.2.w"][...] += 1.0
    out = forward(p, obs)
    assert np.array_equal(out.action_mean, base.action_mean)
    assert not np.array_equal(out.value, base.value)
    p = params.copy()
    p["actor.1.w"][...] += 1.0
    out = forward(p, obs)
    assert np.array_equal(out.value, base.value)


def test_encoder_shared(params):
    obs = _obs(4)
    base = forward(params, obs)
    p = params.copy()
    p["enc.b"][...] += 0.5
    out = forward(p, obs)
    assert not np.array_equal(out.value, base.value)
    assert not np.array_equal(out.action_mean, base.action_mean)


def test_bad_obs_width(params):
    with pytest.raises(ValueError):
        forward(params, np.zeros((1, 12)))


def test_log_prob_examples():
    logp, ent = log_prob_and_entropy(np.zeros(12), np.ones(12), np.zeros(12))
    assert logp == pytest.approx(-12 * 0.5 * math.log(2 * math.pi), abs=1e-12)
    assert logp == pytest.approx(-11.0273, abs=5e-5)
    assert ent == pytest.approx(12 * 0.5 * math.log(2 * math.pi * math.e), abs=1e-12)
    assert ent == pytest.approx(17.0273, abs=5e-5)
    with pytest.raises(ValueError):
        log_prob_and_entropy(np.zeros(12), np.zeros(12), np.zeros(12))


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_log_prob_matches_per_dim_density(seed):
    rng = np.random.default_rng(seed)
    mean = rng.normal(size=12)
    std = rng.uniform(0.1, 2.0, 12)
    x = rng.normal(size=12)
    dens = np.exp(-0.5 * ((x - mean) / std) ** 2) / (std * np.sqrt(2 * np.pi))
    logp, ent = log_prob_and_entropy(mean, std, x)
    assert logp == pytest.approx(np.log(dens).sum(), rel=1e-10, abs=1e-10)
    assert ent == pytest.approx(np.sum(np.log(std * np.sqrt(2 * np.pi * np.e))), rel=1e-12)


def test_constant_loss_zero_gradient():
    p = PolicyParams.init(5, np.float64)
    obs = _obs(5).astype(np.float64)
    _, trace = forward(p, obs, record=True)
    grads = net.backward(p, trace, np.zeros((3, 12)), np.zeros(3), np.zeros(12))
    assert not grads.flat.any()


def test_backward_needs_trace(params):
    with pytest.raises(RuntimeError):
        net.backward(params, None, 0, 0, 0)


@pytest.mark.parametrize("seed", range(3))
def test_finite_difference_gradients(seed):
    worst = gradient_check(seed)
    assert set(worst) == {name for name, _ in LAYOUT}
    assert max(worst.values()) < 1e-4, worst


def test_checkpoint_round_trip(tmp_path, params):
    meta = {"terrain_kind": "straight", "iteration": 3}
    json_path, bin_path = save_checkpoint(tmp_path / "ck", params, meta)
    assert bin_path.stat().st_size == 4 * PARAM_COUNT
    back, manifest = load_checkpoint(json_path)
    assert np.array_equal(back.flat, params.flat)
    assert manifest["terrain_kind"] == "straight"
    assert manifest["param_count"] == PARAM_COUNT
    # re-saving the loaded params gives identical bytes
    save_checkpoint(tmp_path / "again", back, meta)
    assert (tmp_path / "again.bin").read_bytes() == bin_path.read_bytes()


def test_checkpoint_rejects_corruption(tmp_path, params):
    json_path, bin_path = save_checkpoint(tmp_path / "ck", params)
    bin_path.write_bytes(bin_path.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(json_path)
    json_path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(json_path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing")


def test_init_is_seeded():
    assert np.array_equal(PolicyParams.init(9).flat, PolicyParams.init(9).flat)
    assert not np.array_equal(PolicyParams.init(9).flat, PolicyParams.init(10).flat)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros(5))
