"""Independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from stairclimb import net


def brute_force_gae(rewards, values, dones, bootstrap, gamma, lam):
    """Advantages as explicit discounted sums of TD residuals, no recursion."""
    n = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    delta = [rewards[t] + gamma * v_next[t] * (1.0 - dones[t]) - values[t] for t in range(n)]
    adv = np.zeros(n)
    for t in range(n):
        coef = 1.0
        for k in range(t, n):
            adv[t] += coef * delta[k]
            if dones[k]:
                break
            coef *= gamma * lam
    return adv, adv + np.asarray(values)


def gradient_check(seed: int, h: float = 1e-4, per_block: int = 6, batch: int = 4):
    """Worst relative error between analytic and central-difference gradients.

    The scalar loss mixes both heads and log_std so every block receives a
    gradient. Returns ``{block: worst_rel_err}``.
    """
    rng = np.random.default_rng(seed)
    p = net.PolicyParams.init(seed, np.float64)
    p.flat[:] += rng.normal(scale=0.05, size=p.flat.shape)
    obs = rng.normal(size=(batch, net.OBS_DIM))
    obs[:, net.PROPRIO_DIM :] *= 0.5
    cm = rng.normal(size=(batch, net.N_ACT))
    cv = rng.normal(size=batch)
    cs = rng.normal(size=net.N_ACT)

    def loss(params):
        o = net.forward(params, obs)
        return (o.action_mean * cm).sum() + 0.5 * (o.value**2 * cv).sum() + (np.log(o.action_std) * cs).sum()

    def pieces(params):
        # which smooth piece of the network we are on: pool winners and ELU signs
        _, tr = net.forward(params, obs, record=True)
        signs = [a > 0 for a in (tr.p1, tr.flat, tr.trunk, *tr.actor[1:], *tr.critic[1:])]
        return [tr.arg1, tr.arg2, *signs]

    out, trace = net.forward(p, obs, record=True)
    grads = net.backward(p, trace, cm, out.value * cv, cs)
    worst = {}
    for name, _ in net.LAYOUT:
        v = p[name].reshape(-1)
        g = grads[name].reshape(-1)
        err, checked = 0.0, 0
        for i in rng.permutation(v.size):
            if checked == min(per_block, v.size):
                break
            old = v[i]
            v[i] = old + h
            up, piece_up = loss(p), pieces(p)
            v[i] = old - h
            down, piece_down = loss(p), pieces(p)
            v[i] = old
            # a stencil straddling a pool switch or an ELU knee measures the kink, not the gradient
            if not all(np.array_equal(a, b) for a, b in zip(piece_up, piece_down)):
                continue
            fd = (up - down) / (2 * h)
            err = max(err, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-6))
            checked += 1
        worst[name] = err
    return worst
