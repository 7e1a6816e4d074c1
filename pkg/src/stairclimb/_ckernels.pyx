# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``; results match them exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from cython cimport floating

cnp.import_array()

cdef double VOID_HEIGHT = -10.0


cdef void _sample(const double[:, :, ::1] heights, double cell, const long long[::1] tid,
                  const double[::1] x, const double[::1] y, double[::1] out) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef Py_ssize_t nx = heights.shape[1], ny = heights.shape[2]
    cdef long long ix, iy
    for i in range(n):
        ix = <long long>floor(x[i] / cell)
        iy = <long long>floor(y[i] / cell)
        if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
            out[i] = VOID_HEIGHT
        else:
            out[i] = heights[tid[i], ix, iy]


def sample_heights(heights, double cell, tid, x, y):
    xa = np.asarray(x, dtype=np.float64)
    shape = xa.shape
    xf = np.ascontiguousarray(xa.ravel())
    yf = np.ascontiguousarray(np.asarray(y, dtype=np.float64).ravel())
    tf = np.ascontiguousarray(np.broadcast_to(np.asarray(tid, dtype=np.int64), shape).ravel())
    out = np.empty(xf.shape[0], dtype=np.float64)
    _sample(np.ascontiguousarray(heights, dtype=np.float64), cell, tf, xf, yf, out)
    return out.reshape(shape)


cdef void _im2col(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] cols) noexcept nogil:
    cdef Py_ssize_t b, i, j, dy, dx, c, si, sj, k
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], w = x.shape[2], nc = x.shape[3]
    for b in range(nb):
        for i in range(h):
            for j in range(w):
                k = 0
                for dy in range(3):
                    si = i + dy - 1
                    for dx in range(3):
                        sj = j + dx - 1
                        if si < 0 or si >= h or sj < 0 or sj >= w:
                            for c in range(nc):
                                cols[b, i, j, k + c] = 0
                        else:
                            for c in range(nc):
                                cols[b, i, j, k + c] = x[b, si, sj, c]
                        k += nc


def im2col3x3(x):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cols = np.empty((b, h, w, 9 * c), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, cols)
    elif x.dtype == np.float64:
        _im2col[double](x, cols)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


cdef void _col2im(const floating[:, :, :, ::1] d, floating[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t b, i, j, dy, dx, c, si, sj, k
    cdef Py_ssize_t nb = out.shape[0], h = out.shape[1], w = out.shape[2], nc = out.shape[3]
    # gather form of the scatter-add: out[si, sj] collects from every patch that saw it
    for b in range(nb):
        for si in range(h):
            for sj in range(w):
                for c in range(nc):
                    out[b, si, sj, c] = 0
                for dy in range(3):
                    i = si - dy + 1
                    if i < 0 or i >= h:
                        continue
                    for dx in range(3):
                        j = sj - dx + 1
                        if j < 0 or j >= w:
                            continue
                        k = (dy * 3 + dx) * nc
                        for c in range(nc):
                            out[b, si, sj, c] += d[b, i, j, k + c]


def col2im3x3(dcols, Py_ssize_t c):
    dcols = np.ascontiguousarray(dcols)
    cdef Py_ssize_t b = dcols.shape[0], h = dcols.shape[1], w = dcols.shape[2]
    if dcols.shape[3] != 9 * c:
        raise ValueError("last axis must be 9 * channels")
    out = np.empty((b, h, w, c), dtype=dcols.dtype)
    if dcols.dtype == np.float32:
        _col2im[float](dcols, out)
    elif dcols.dtype == np.float64:
        _col2im[double](dcols, out)
    else:
        raise TypeError(f"unsupported dtype {dcols.dtype}")
    return out


cdef void _pool(const floating[:, :, :, ::1] x, floating[:, :, :, ::1] out,
                cnp.int8_t[:, :, :, ::1] arg) noexcept nogil:
    cdef Py_ssize_t b, i, j, c, q
    cdef Py_ssize_t nb = out.shape[0], ho = out.shape[1], wo = out.shape[2], nc = out.shape[3]
    cdef floating best, v
    cdef cnp.int8_t a
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                for c in range(nc):
                    best = x[b, 2 * i, 2 * j, c]
                    a = 0
                    for q in range(1, 4):
                        v = x[b, 2 * i + q // 2, 2 * j + q % 2, c]
                        if v > best:
                            best = v
                            a = <cnp.int8_t>q
                    out[b, i, j, c] = best
                    arg[b, i, j, c] = a


def maxpool2x2(x):
    x = np.ascontiguousarray(x)
    cdef Py_ssize_t b = x.shape[0], ho = x.shape[1] // 2, wo = x.shape[2] // 2, c = x.shape[3]
    out = np.empty((b, ho, wo, c), dtype=x.dtype)
    arg = np.empty((b, ho, wo, c), dtype=np.int8)
    if x.dtype == np.float32:
        _pool[float](x, out, arg)
    elif x.dtype == np.float64:
        _pool[double](x, out, arg)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out, arg


cdef void _unpool(const floating[:, :, :, ::1] d, const cnp.int8_t[:, :, :, ::1] arg,
                  floating[:, :, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t b, i, j, c, q
    cdef Py_ssize_t nb = d.shape[0], ho = d.shape[1], wo = d.shape[2], nc = d.shape[3]
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                for c in range(nc):
                    q = arg[b, i, j, c]
                    out[b, 2 * i + q // 2, 2 * j + q % 2, c] = d[b, i, j, c]


def maxpool2x2_backward(dout, arg, Py_ssize_t h, Py_ssize_t w):
    dout = np.ascontiguousarray(dout)
    arg = np.ascontiguousarray(arg, dtype=np.int8)
    out = np.zeros((dout.shape[0], h, w, dout.shape[3]), dtype=dout.dtype)
    if dout.dtype == np.float32:
        _unpool[float](dout, arg, out)
    elif dout.dtype == np.float64:
        _unpool[double](dout, arg, out)
    else:
        raise TypeError(f"unsupported dtype {dout.dtype}")
    return out


cdef enum:
    LANES = 8


cdef void _conv_pool(const floating[:, :, ::1] x, const floating[:, ::1] w, const floating[::1] bias,
                     floating[:, :, :, ::1] out, cnp.int8_t[:, :, :, ::1] arg,
                     floating[:, ::1] xp) noexcept nogil:
    # channels are processed in blocks of LANES so the innermost loops have a
    # constant trip count the compiler can unroll and vectorise
    cdef Py_ssize_t b, i, j, q, k, c, c0, cb, r, s
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2], nc = out.shape[3]
    cdef Py_ssize_t pw = xp.shape[1]
    cdef floating acc[LANES]
    cdef floating best[LANES]
    cdef cnp.int8_t barg[LANES]
    cdef floating xv
    cdef const floating* wp = &w[0, 0]
    cdef const floating* wk
    cdef const floating* xs
    cdef floating* px = &xp[0, 0]
    cdef floating* o
    cdef cnp.int8_t* a
    # xp is the zero-padded sample; its border stays zero across the batch
    for b in range(nb):
        xs = &x[b, 0, 0]
        for r in range(h):
            for s in range(wd):
                px[(r + 1) * pw + s + 1] = xs[r * wd + s]
        for i in range(ho):
            for j in range(wo):
                o = &out[b, i, j, 0]
                a = &arg[b, i, j, 0]
                for cb in range(nc // LANES):
                    c0 = cb * LANES
                    for q in range(4):
                        r = 2 * i + q // 2
                        s = 2 * j + q % 2
                        for c in range(LANES):
                            acc[c] = bias[c0 + c]
                        for k in range(9):
                            xv = px[(r + k // 3) * pw + s + k % 3]
                            wk = wp + k * nc + c0
                            for c in range(LANES):
                                acc[c] += xv * wk[c]
                        if q == 0:
                            for c in range(LANES):
                                best[c] = acc[c]
                                barg[c] = 0
                        else:
                            for c in range(LANES):
                                if acc[c] > best[c]:
                                    best[c] = acc[c]
                                    barg[c] = <cnp.int8_t>q
                    for c in range(LANES):
                        o[c0 + c] = best[c]
                        a[c0 + c] = barg[c]


def conv3x3_maxpool(x, w, bias):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    cdef Py_ssize_t nc = w.shape[1]
    if w.shape[0] != 9 or nc % LANES:
        raise ValueError(f"weights must be (9, C) with C a multiple of {LANES}")
    out = np.empty((x.shape[0], x.shape[1] // 2, x.shape[2] // 2, nc), dtype=x.dtype)
    arg = np.empty(out.shape, dtype=np.int8)
    xp = np.zeros((x.shape[1] + 2, x.shape[2] + 2), dtype=x.dtype)
    if x.dtype == np.float32:
        _conv_pool[float](x, w, bias, out, arg, xp)
    elif x.dtype == np.float64:
        _conv_pool[double](x, w, bias, out, arg, xp)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return out, arg


cdef void _conv_pool_wgrad(const floating[:, :, ::1] x, const cnp.int8_t[:, :, :, ::1] arg,
                           const floating[:, :, :, ::1] dm, double[:, ::1] dw, double[::1] db) noexcept nogil:
    cdef Py_ssize_t b, i, j, k, c, q, r, s, si, sj
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef Py_ssize_t ho = dm.shape[1], wo = dm.shape[2], nc = dm.shape[3]
    cdef double g
    for b in range(nb):
        for i in range(ho):
            for j in range(wo):
                for c in range(nc):
                    g = dm[b, i, j, c]
                    q = arg[b, i, j, c]
                    r = 2 * i + q // 2
                    s = 2 * j + q % 2
                    db[c] += g
                    for k in range(9):
                        si = r + k // 3 - 1
                        sj = s + k % 3 - 1
                        if si < 0 or si >= h or sj < 0 or sj >= wd:
                            continue
                        dw[k, c] += g * x[b, si, sj]


def conv3x3_maxpool_wgrad(x, arg, dm):
    x = np.ascontiguousarray(x)
    dm = np.ascontiguousarray(dm, dtype=x.dtype)
    arg = np.ascontiguousarray(arg, dtype=np.int8)
    nc = dm.shape[3]
    dw = np.zeros((9, nc), dtype=np.float64)
    db = np.zeros(nc, dtype=np.float64)
    if x.dtype == np.float32:
        _conv_pool_wgrad[float](x, arg, dm, dw, db)
    elif x.dtype == np.float64:
        _conv_pool_wgrad[double](x, arg, dm, dw, db)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return dw.astype(x.dtype), db.astype(x.dtype)


cdef extern from "math.h" nogil:
    float expm1f(float)
    double expm1(double)


cdef void _elu(const floating* z, floating* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        if z[i] > 0:
            a[i] = z[i]
        elif floating is float:
            a[i] = expm1f(z[i])
        else:
            a[i] = expm1(z[i])


def elu(z):
    z = np.ascontiguousarray(z)
    a = np.empty_like(z)
    cdef Py_ssize_t n = z.size
    if n == 0:
        return a
    cdef float[::1] zf, af
    cdef double[::1] zd, ad
    if z.dtype == np.float32:
        zf = z.reshape(-1)
        af = a.reshape(-1)
        _elu(&zf[0], &af[0], n)
    elif z.dtype == np.float64:
        zd = z.reshape(-1)
        ad = a.reshape(-1)
        _elu(&zd[0], &ad[0], n)
    else:
        raise TypeError(f"unsupported dtype {z.dtype}")
    return a


cdef void _elu_bwd(const floating* d, const floating* a, floating* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = d[i] if a[i] > 0 else d[i] * (a[i] + 1)


def elu_backward(d, a):
    a = np.ascontiguousarray(a)
    d = np.ascontiguousarray(d, dtype=a.dtype)
    if d.shape != a.shape:
        raise ValueError("gradient and activation shapes differ")
    out = np.empty_like(a)
    cdef Py_ssize_t n = a.size
    if n == 0:
        return out
    cdef float[::1] df, af, of
    cdef double[::1] dd, ad, od
    if a.dtype == np.float32:
        df = d.reshape(-1)
        af = a.reshape(-1)
        of = out.reshape(-1)
        _elu_bwd(&df[0], &af[0], &of[0], n)
    elif a.dtype == np.float64:
        dd = d.reshape(-1)
        ad = a.reshape(-1)
        od = out.reshape(-1)
        _elu_bwd(&dd[0], &ad[0], &od[0], n)
    else:
        raise TypeError(f"unsupported dtype {a.dtype}")
    return out
