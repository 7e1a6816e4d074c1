"""Pure-numpy reference kernels. Same signatures as the compiled ``_ckernels``."""

from __future__ import annotations

import numpy as np

VOID_HEIGHT = -10.0


def sample_heights(heights, cell, tid, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tid = np.broadcast_to(np.asarray(tid, dtype=np.int64), x.shape)
    _, nx, ny = heights.shape
    ix = np.floor(x / cell).astype(np.int64)
    iy = np.floor(y / cell).astype(np.int64)
    ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    out = np.full(x.shape, VOID_HEIGHT)
    out[ok] = heights[tid[ok], ix[ok], iy[ok]]
    return out


def im2col3x3(x):
    """``(B, H, W, C)`` -> ``(B, H, W, 9*C)`` patches of the zero-padded input, (dy, dx, c) order."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy : dy + h, dx : dx + w, :]
    return cols.reshape(b, h, w, 9 * c)


def col2im3x3(dcols, c):
    """Adjoint of :func:`im2col3x3`: scatter-add patch gradients back to ``(B, H, W, C)``."""
    b, h, w, _ = dcols.shape
    d = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dxp[:, dy : dy + h, dx : dx + w, :] += d[:, :, :, k, :]
    return dxp[:, 1:-1, 1:-1, :]


def maxpool2x2(x):
    """Floor-mode 2x2 max pool. Returns ``(out, argmax)`` with argmax in 0..3 (first max wins)."""
    b, h, w, c = x.shape
    ho, wo = h // 2, w // 2
    v = x[:, : 2 * ho, : 2 * wo, :].reshape(b, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4)
    v = v.reshape(b, ho, wo, c, 4)
    arg = np.argmax(v, axis=-1)
    out = np.take_along_axis(v, arg[..., None], axis=-1)[..., 0]
    return out, arg.astype(np.int8)


def maxpool2x2_backward(dout, arg, h, w):
    b, ho, wo, c = dout.shape
    onehot = (arg[..., None] == np.arange(4, dtype=np.int8)) * dout[..., None]
    v = onehot.reshape(b, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * ho, 2 * wo, c)
    dx = np.zeros((b, h, w, c), dtype=dout.dtype)
    dx[:, : 2 * ho, : 2 * wo, :] = v
    return dx


def conv3x3_maxpool(x, w, bias):
    """Single-channel 3x3 'same' conv then 2x2 max pool of the pre-activations.

    ``x`` is ``(B, H, W)``, ``w`` is ``(9, C)``. Returns pooled ``(B, H//2, W//2, C)`` and argmax.
    """
    z = im2col3x3(x[..., None]) @ w + bias
    return maxpool2x2(z)


def conv3x3_maxpool_wgrad(x, arg, dm):
    """Weight and bias gradients of :func:`conv3x3_maxpool` given the pooled gradient ``dm``."""
    b, h, w = x.shape
    dz = maxpool2x2_backward(dm, arg, h, w)
    cols = im2col3x3(x[..., None])
    c = dm.shape[3]
    return cols.reshape(-1, 9).T @ dz.reshape(-1, c), dz.sum(axis=(0, 1, 2))


def elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0)))


def elu_backward(d, a):
    """Chain rule through ELU from its output ``a``: the slope is 1 above zero and ``a + 1`` below."""
    return d * np.where(a > 0, 1, a + 1).astype(a.dtype)
