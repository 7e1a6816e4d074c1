"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 256] [--repeat 5]

Per-kernel timings call both implementations directly. The end-to-end rows
time one forward+backward pass of the network and one env step, each in a
subprocess so the backend switch (``STAIRCLIMB_PURE_PYTHON``) takes effect.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from stairclimb import _kernels_py as py

try:
    from stairclimb import _ckernels as cy
except ImportError:
    cy = None

END_TO_END = r"""
import json, sys, timeit
import numpy as np
from stairclimb import kernels, net
from stairclimb.env import TerrainBank, VecEnv
batch, repeat = int(sys.argv[1]), int(sys.argv[2])
rng = np.random.default_rng(0)
p = net.PolicyParams.init(0)
obs = rng.normal(size=(batch, net.OBS_DIM)).astype(np.float32)
def fb():
    out, tr = net.forward(p, obs, record=True)
    net.backward(p, tr, np.ones_like(out.action_mean), np.ones_like(out.value), np.zeros(12, np.float32))
bank = TerrainBank.build(["u_shaped"], "train", [3])
env = VecEnv(bank, batch)
for i in range(batch):
    env.reset(i, "u_shaped", 3, i)
acts = rng.uniform(-1, 1, (batch, 12))
res = {
    "backend": kernels.BACKEND,
    "forward_backward_ms": 1000 * min(timeit.repeat(fb, number=1, repeat=repeat)),
    "env_step_ms": 1000 * min(timeit.repeat(lambda: env.step(acts), number=1, repeat=repeat)),
}
print(json.dumps(res))
"""


def best_ms(fn, repeat: int) -> float:
    fn()
    return 1000 * min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(batch: int):
    rng = np.random.default_rng(0)
    hm = rng.normal(size=(batch, 21, 21)).astype(np.float32)
    w1 = rng.normal(size=(9, 8)).astype(np.float32)
    b1 = np.zeros(8, np.float32)
    p1 = rng.normal(size=(batch, 10, 10, 8)).astype(np.float32)
    cols = rng.normal(size=(batch, 10, 10, 72)).astype(np.float32)
    z2 = rng.normal(size=(batch, 10, 10, 16)).astype(np.float32)
    m1, arg1 = py.conv3x3_maxpool(hm, w1, b1)
    _, arg2 = py.maxpool2x2(z2)
    dm2 = rng.normal(size=(batch, 5, 5, 16)).astype(np.float32)
    act = rng.normal(size=(batch, 128)).astype(np.float32)
    heights = rng.normal(size=(4, 140, 90))
    tid = rng.integers(0, 4, size=(batch, 441))
    x = rng.uniform(0, 7, size=(batch, 441))
    y = rng.uniform(0, 4.5, size=(batch, 441))
    return {
        "conv1+pool": lambda k: k.conv3x3_maxpool(hm, w1, b1),
        "conv1 wgrad": lambda k: k.conv3x3_maxpool_wgrad(hm, arg1, m1),
        "im2col 3x3": lambda k: k.im2col3x3(p1),
        "col2im 3x3": lambda k: k.col2im3x3(cols, 8),
        "maxpool 2x2": lambda k: k.maxpool2x2(z2),
        "maxpool backward": lambda k: k.maxpool2x2_backward(dm2, arg2, 10, 10),
        "elu": lambda k: k.elu(act),
        "elu backward": lambda k: k.elu_backward(act, act),
        "sample heights": lambda k: k.sample_heights(heights, 0.05, tid, x, y),
    }


def end_to_end(batch: int, repeat: int, pure: bool) -> dict:
    env = dict(os.environ)
    if pure:
        env["STAIRCLIMB_PURE_PYTHON"] = "1"
    else:
        env.pop("STAIRCLIMB_PURE_PYTHON", None)
    out = subprocess.run(
        [sys.executable, "-c", END_TO_END, str(batch), str(repeat)], env=env, capture_output=True, text=True, check=True
    )
    return json.loads(out.stdout)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; only the numpy fallback is available", file=sys.stderr)

    print(f"batch {args.batch}, best of {args.repeat}")
    print(f"{'kernel':20s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, case in kernel_cases(args.batch).items():
        t_py = best_ms(lambda: case(py), args.repeat)
        if cy is None:
            print(f"{name:20s} {t_py:10.3f} {'-':>10s} {'-':>8s}")
            continue
        t_cy = best_ms(lambda: case(cy), args.repeat)
        print(f"{name:20s} {t_py:10.3f} {t_cy:10.3f} {t_py / t_cy:7.1f}x")

    rows = [end_to_end(args.batch, args.repeat, pure=True)]
    if cy is not None:
        rows.append(end_to_end(args.batch, args.repeat, pure=False))
    print()
    print(f"{'backend':10s} {'fwd+bwd ms':>11s} {'env step ms':>12s}")
    for r in rows:
        print(f"{r['backend']:10s} {r['forward_backward_ms']:11.1f} {r['env_step_ms']:12.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
