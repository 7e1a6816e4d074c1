import csv
import math

import numpy as np
import pytest
from helpers import brute_force_gae
from hypothesis import given, settings
from hypothesis import strategies as st

from stairclimb import net
from stairclimb.config import RunConfig
from stairclimb.net import PolicyParams, forward, load_checkpoint, log_prob_and_entropy, save_checkpoint
from stairclimb.ppo import (
    METRIC_COLUMNS,
    Adam,
    PpoConfig,
    clip_grad_norm,
    compute_gae,
    normalize_advantages,
    ppo_loss,
    train,
)


def test_gae_telescoping():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    adv, ret = compute_gae(r, np.zeros(4), np.zeros(4), 0.0, 1.0, 1.0)
    assert np.array_equal(adv, [10.0, 9.0, 7.0, 4.0])
    assert np.array_equal(ret, adv)


def test_gae_three_step_example():
    adv, _ = compute_gae(np.ones(3), np.zeros(3), np.array([0, 0, 1.0]), 0.0, 0.99, 0.95)
    g = 0.99 * 0.95
    assert np.allclose(adv, [1 + g + g * g, 1 + g, 1.0], atol=1e-12)
    assert np.allclose(adv, [2.82505, 1.9405, 1.0], atol=5e-6)


def test_gae_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = rng.normal(size=10)
        v = rng.normal(size=10)
        d = (rng.random(10) < 0.25).astype(float)
        boot = rng.normal()
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, d, boot, gamma, lam)
        oracle_adv, oracle_ret = brute_force_gae(r, v, d, boot, gamma, lam)
        assert np.max(np.abs(adv - oracle_adv)) < 1e-10
        assert np.max(np.abs(ret - oracle_ret)) < 1e-10


def test_gae_batched_columns_independent():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    d = (rng.random((6, 3)) < 0.3).astype(float)
    boot = rng.normal(size=3)
    adv, _ = compute_gae(r, v, d, boot, 0.97, 0.9)
    for j in range(3):
        col, _ = compute_gae(r[:, j], v[:, j], d[:, j], boot[j], 0.97, 0.9)
        assert np.array_equal(adv[:, j], col)
    with pytest.raises(ValueError):
        compute_gae(r, v[:5], d, boot, 0.9, 0.9)
    with pytest.raises(ValueError):
        compute_gae(r, v, d, 0.0, 0.9, 0.9)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=50))
def test_normalized_advantages(values):
    a = np.array(values)
    n = normalize_advantages(a)
    assert abs(n.mean()) < 1e-6
    if a.std() > 1e-3:
        assert n.std() == pytest.approx(1.0, rel=1e-4)


# -- surrogate loss --------------------------------------------------------------


@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(3)
    p = PolicyParams.init(3, np.float64)
    obs = rng.normal(size=(8, net.OBS_DIM))
    out = forward(p, obs)
    actions = out.action_mean + out.action_std * rng.normal(size=(8, 12))
    logp, _ = log_prob_and_entropy(out.action_mean, out.action_std, actions)
    adv = rng.normal(size=8)
    return p, obs, actions, logp, adv, out.value.copy()


def test_identity_ratio(batch):
    p, obs, actions, logp, adv, value = batch
    terms, _ = ppo_loss(p, obs, actions, logp, adv, value, PpoConfig(), grad=False)
    assert terms.policy_loss == pytest.approx(-adv.mean(), abs=1e-12)
    assert terms.value_loss == pytest.approx(0.0, abs=1e-20)
    assert terms.clip_frac == 0.0


def test_clipped_branch(batch):
    p, obs, actions, logp, _, value = batch
    adv = np.ones(8)
    cfg = PpoConfig()
    terms, grads = ppo_loss(p, obs, actions, logp - math.log(1.3), adv, value, cfg)
    assert terms.policy_loss == pytest.approx(-1.2, abs=1e-12)
    assert terms.clip_frac == 1.0
    # the clipped branch is flat: only the entropy bonus moves the policy
    assert np.allclose(grads["log_std"], -cfg.entropy_coef)
    assert not grads["actor.3.w"].any()


def test_entropy_bonus_sign(batch):
    p, obs, actions, logp, adv, value = batch
    base = ppo_loss(p, obs, actions, logp, adv, value, PpoConfig(entropy_coef=0.0), grad=False)[0]
    bonus = ppo_loss(p, obs, actions, logp, adv, value, PpoConfig(entropy_coef=0.1), grad=False)[0]
    assert bonus.total == pytest.approx(base.total - 0.1 * base.entropy)


def test_infinite_clip_equals_vanilla_policy_gradient(batch):
    p, obs, actions, logp, adv, value = batch
    p = p.copy()
    cfg = PpoConfig(clip=1e9, value_coef=0.0, entropy_coef=0.0)
    _, grads = ppo_loss(p, obs, actions, logp, adv, value, cfg)
    _, grads_clipped = ppo_loss(p, obs, actions, logp, adv, value, PpoConfig(value_coef=0.0, entropy_coef=0.0))
    assert np.array_equal(grads.flat, grads_clipped.flat)  # ratio 1 sits inside any band

    def vanilla(params):
        out = forward(params, obs)
        lp, _ = log_prob_and_entropy(out.action_mean, out.action_std, actions)
        return -np.mean(np.exp(lp - logp) * adv)

    rng = np.random.default_rng(4)
    for name in ("log_std", "actor.3.w", "actor.0.w", "enc.w"):
        v, g = p[name].reshape(-1), grads[name].reshape(-1)
        for i in rng.choice(v.size, 4, replace=False):
            old = v[i]
            v[i] = old + 1e-5
            up = vanilla(p)
            v[i] = old - 1e-5
            down = vanilla(p)
            v[i] = old
            assert (up - down) / 2e-5 == pytest.approx(g[i], rel=1e-5, abs=1e-9)


def test_value_gradient_matches_finite_difference(batch):
    p, obs, actions, logp, adv, value = batch
    p = p.copy()
    returns = value + 1.0
    cfg = PpoConfig(entropy_coef=0.0)
    _, grads = ppo_loss(p, obs, actions, logp, adv, returns, cfg)

    def loss(params):
        return ppo_loss(params, obs, actions, logp, adv, returns, cfg, grad=False)[0].total

    v, g = p["critic.3.b"], grads["critic.3.b"]
    old = v[0]
    v[0] = old + 1e-6
    up = loss(p)
    v[0] = old - 1e-6
    down = loss(p)
    v[0] = old
    assert (up - down) / 2e-6 == pytest.approx(g[0], rel=1e-6)
    assert g[0] == pytest.approx(-1.0, rel=1e-9)  # 0.5 * 2 * mean(V - R)


def test_non_finite_loss_raises(batch):
    p, obs, actions, logp, adv, value = batch
    with pytest.raises(FloatingPointError):
        ppo_loss(p, obs, actions, logp, adv * np.nan, value, PpoConfig(), grad=False)


# -- optimiser -------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    x = np.zeros(3, np.float32)
    Adam(3, lr=0.1).step(x, np.array([2.0, -0.5, 0.0], np.float32))
    assert np.allclose(x, [-0.1, 0.1, 0.0], atol=1e-6)


def test_grad_norm_clip():
    g = np.array([3.0, 4.0])
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.allclose(g, [0.6, 0.8])
    g = np.array([0.3, 0.4])
    clip_grad_norm(g, 1.0)
    assert np.array_equal(g, [0.3, 0.4])


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        PpoConfig(rollout_steps=3, n_env=3, minibatches=4)
    with pytest.raises(ValueError):
        PpoConfig.from_dict({"learning_rate": 1.0})


# -- training loop ---------------------------------------------------------------


def _tiny(seed=5, **over):
    data = {
        "seed": seed,
        "stage": "stage2",
        "terrain": {"kind": "straight"},
        "ppo": {"n_env": 8, "rollout_steps": 8, "minibatches": 2, "epochs": 1, "iterations": 2, "checkpoint_every": 1},
    }
    data.update(over)
    return RunConfig.from_dict(data)


def test_train_outputs(tmp_path):
    res = train(_tiny(), tmp_path)
    rows = list(csv.reader(open(res["metrics_path"])))
    assert rows[0][: len(METRIC_COLUMNS)] == METRIC_COLUMNS
    assert rows[0][len(METRIC_COLUMNS) :] == [f"level_{k}" for k in range(1, 11)]
    assert len(rows) == 3
    for row in rows[1:]:
        assert sum(int(v) for v in row[len(METRIC_COLUMNS) :]) == 8
    assert len(res["checkpoints"]) == 3
    assert (tmp_path / "timing.csv").exists()
    _, meta = load_checkpoint(res["final_checkpoint"])
    assert meta["terrain_kind"] == "straight" and meta["stage"] == "stage2"


def test_train_deterministic_across_workers(tmp_path):
    a = train(_tiny(), tmp_path / "a", workers=1)
    b = train(_tiny(), tmp_path / "b", workers=2)
    assert a["metrics_path"].read_bytes() == b["metrics_path"].read_bytes()
    assert (tmp_path / "a/checkpoints/stage2_final.bin").read_bytes() == (
        tmp_path / "b/checkpoints/stage2_final.bin"
    ).read_bytes()


def test_warm_start_contract(tmp_path):
    src = PolicyParams.init(77)
    save_checkpoint(tmp_path / "stage1_final", src, {"terrain_kind": "pyramid"})
    res = train(_tiny(), tmp_path / "run", warm_start=tmp_path / "stage1_final")
    first, _ = load_checkpoint(res["checkpoints"][0])
    assert np.array_equal(first.flat, src.flat)


def test_missing_warm_start_warns(tmp_path, caplog):
    with caplog.at_level("WARNING"):
        train(_tiny(), tmp_path, warm_start=tmp_path / "nope")
    assert "not found" in caplog.text


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 1000))
def test_trainer_seeded_reproducibly(seed):
    from stairclimb.ppo import Trainer

    t = Trainer(_tiny(seed=seed, ppo={"n_env": 2, "rollout_steps": 2, "minibatches": 1}))
    u = Trainer(_tiny(seed=seed, ppo={"n_env": 2, "rollout_steps": 2, "minibatches": 1}))
    assert np.array_equal(t.params.flat, u.params.flat)
    assert np.array_equal(t.obs, u.obs)
