import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stairclimb import _kernels_py as py
from stairclimb import kernels

try:
    from stairclimb import _ckernels as cy
except ImportError:  # extension not built
    cy = None

needs_ext = pytest.mark.skipif(cy is None, reason="Cython extension not built")
DTYPES = [np.float32, np.float64]


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_im2col_matches_direct_convolution():
    rng = _rng(1)
    x = rng.normal(size=(2, 7, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    got = (py.im2col3x3(x) @ w.reshape(27, 4)).reshape(2, 7, 6, 4)
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    want = np.zeros_like(got)
    for dy in range(3):
        for dx in range(3):
            want += np.einsum("bhwc,co->bhwo", pad[:, dy : dy + 7, dx : dx + 6], w[dy, dx])
    assert np.allclose(got, want)


def test_col2im_is_adjoint():
    rng = _rng(2)
    x = rng.normal(size=(2, 5, 4, 3))
    g = rng.normal(size=(2, 5, 4, 27))
    assert np.dot(py.im2col3x3(x).ravel(), g.ravel()) == pytest.approx(np.dot(x.ravel(), py.col2im3x3(g, 3).ravel()))


def test_maxpool_floor_and_first_max():
    x = np.zeros((1, 5, 5, 1))
    x[0, 0, 1, 0] = 2.0
    out, arg = py.maxpool2x2(x)
    assert out.shape == (1, 2, 2, 1)
    assert out[0, 0, 0, 0] == 2.0 and arg[0, 0, 0, 0] == 1
    assert arg[0, 1, 1, 0] == 0  # all-zero window: the first cell wins
    back = py.maxpool2x2_backward(np.ones_like(out), arg, 5, 5)
    assert back.shape == (1, 5, 5, 1) and back.sum() == 4 and back[0, 4].sum() == 0


def test_elu_values():
    z = np.array([-2.0, 0.0, 3.0])
    assert np.allclose(py.elu(z), [np.expm1(-2.0), 0.0, 3.0])
    a = py.elu(z)
    assert np.allclose(py.elu_backward(np.ones(3), a), [np.exp(-2.0), np.exp(0.0), 1.0])


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
def test_backends_agree(dtype):
    rng = _rng(3)
    tol = 1e-5 if dtype is np.float32 else 1e-12
    x = rng.normal(size=(3, 10, 10, 8)).astype(dtype)
    assert np.array_equal(cy.im2col3x3(x), py.im2col3x3(x))
    cols = rng.normal(size=(3, 10, 10, 72)).astype(dtype)
    assert np.allclose(cy.col2im3x3(cols, 8), py.col2im3x3(cols, 8), atol=tol)
    for a, b in zip(cy.maxpool2x2(x), py.maxpool2x2(x)):
        assert np.array_equal(a, b)
    out, arg = py.maxpool2x2(x)
    assert np.array_equal(cy.maxpool2x2_backward(out, arg, 10, 10), py.maxpool2x2_backward(out, arg, 10, 10))
    z = rng.normal(size=(4, 33)).astype(dtype)
    assert np.allclose(cy.elu(z), py.elu(z), atol=tol, rtol=tol)
    a = py.elu(z)
    assert np.allclose(cy.elu_backward(z, a), py.elu_backward(z, a), atol=tol, rtol=tol)


@needs_ext
@pytest.mark.parametrize("dtype", DTYPES)
def test_fused_conv_pool_agree(dtype):
    rng = _rng(4)
    tol = 1e-5 if dtype is np.float32 else 1e-12
    x = rng.normal(size=(5, 21, 21)).astype(dtype)
    w = rng.normal(size=(9, 8)).astype(dtype)
    b = rng.normal(size=8).astype(dtype)
    mc, ac = cy.conv3x3_maxpool(x, w, b)
    mp, ap = py.conv3x3_maxpool(x, w, b)
    assert mc.shape == (5, 10, 10, 8)
    assert np.allclose(mc, mp, atol=tol)
    agree = ac == ap
    assert agree.mean() > 0.999  # float32 rounding can flip exact near-ties
    dm = rng.normal(size=mc.shape).astype(dtype)
    dwc, dbc = cy.conv3x3_maxpool_wgrad(x, ap, dm)
    dwp, dbp = py.conv3x3_maxpool_wgrad(x, ap, dm)
    assert np.allclose(dwc, dwp, atol=50 * tol, rtol=tol)
    assert np.allclose(dbc, dbp, atol=50 * tol, rtol=tol)


@needs_ext
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sample_heights_agree(seed):
    rng = _rng(seed)
    heights = rng.normal(size=(3, 12, 9))
    tid = rng.integers(0, 3, size=40)
    x = rng.uniform(-0.2, 0.8, size=40)
    y = rng.uniform(-0.2, 0.6, size=40)
    assert np.array_equal(cy.sample_heights(heights, 0.05, tid, x, y), py.sample_heights(heights, 0.05, tid, x, y))


def test_backend_switch():
    code = "import stairclimb.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, STAIRCLIMB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    expected = "cython" if cy is not None else "python"
    env.pop("STAIRCLIMB_PURE_PYTHON")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
    assert kernels.BACKEND in ("cython", "python")
