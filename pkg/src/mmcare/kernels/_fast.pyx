# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused single-pass kernels for softmax and layer-norm rows.

Sequences here are short (tens of tokens) and widths small, so numpy's
multi-pass evaluation is dominated by dispatch overhead; these loops fuse
each row into one pass.
"""

import numpy as np
from libc.math cimport exp as c_exp, sqrt as c_sqrt

ctypedef fused real:
    float
    double


def _softmax_fwd_impl(real[:, ::1] x, real[:, ::1] y):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double m, s, v
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        s = 0.0
        for j in range(n):
            v = c_exp(x[r, j] - m)
            y[r, j] = <real> v
            s += v
        for j in range(n):
            y[r, j] = <real> (y[r, j] / s)


def _softmax_bwd_impl(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] gx):
    cdef Py_ssize_t rows = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t r, j
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += y[r, j] * gy[r, j]
        for j in range(n):
            gx[r, j] = <real> (y[r, j] * (gy[r, j] - dot))


def _layernorm_fwd_impl(real[:, ::1] x, real[::1] gain, real[::1] bias,
                        double eps, real[:, ::1] y, real[:, ::1] xhat,
                        real[::1] inv_std):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t r, j
    cdef double mu, var, istd, h
    for r in range(rows):
        mu = 0.0
        for j in range(n):
            mu += x[r, j]
        mu /= n
        var = 0.0
        for j in range(n):
            var += (x[r, j] - mu) * (x[r, j] - mu)
        var /= n
        istd = 1.0 / c_sqrt(var + eps)
        inv_std[r] = <real> istd
        for j in range(n):
            h = (x[r, j] - mu) * istd
            xhat[r, j] = <real> h
            y[r, j] = <real> (h * gain[j] + bias[j])


def _layernorm_bwd_impl(real[:, ::1] gy, real[:, ::1] xhat, real[::1] inv_std,
                        real[::1] gain, real[:, ::1] gx, real[::1] ggain,
                        real[::1] gbias):
    cdef Py_ssize_t rows = gy.shape[0], n = gy.shape[1]
    cdef Py_ssize_t r, j
    cdef double mg, mgx, gh
    for r in range(rows):
        mg = 0.0
        mgx = 0.0
        for j in range(n):
            gh = gy[r, j] * gain[j]
            mg += gh
            mgx += gh * xhat[r, j]
        mg /= n
        mgx /= n
        for j in range(n):
            gh = gy[r, j] * gain[j]
            gx[r, j] = <real> ((gh - mg - xhat[r, j] * mgx) * inv_std[r])
            ggain[j] += <real> (gy[r, j] * xhat[r, j])
            gbias[j] += gy[r, j]


def _rows2d(a):
    # note: wraparound is off module-wide, so avoid negative tuple indices
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[a.ndim - 1]), a.shape


def softmax_fwd(x):
    x2, shape = _rows2d(x)
    y = np.empty_like(x2)
    _softmax_fwd_impl(x2, y)
    return y.reshape(shape)


def softmax_bwd(y, gy):
    y2, shape = _rows2d(y)
    gy2, _ = _rows2d(np.asarray(gy, dtype=y2.dtype))
    gx = np.empty_like(y2)
    _softmax_bwd_impl(y2, gy2, gx)
    return gx.reshape(shape)


def layernorm_fwd(x, gain, bias, eps):
    x2, shape = _rows2d(x)
    gain = np.ascontiguousarray(gain, dtype=x2.dtype)
    bias = np.ascontiguousarray(bias, dtype=x2.dtype)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv_std = np.empty(x2.shape[0], dtype=x2.dtype)
    _layernorm_fwd_impl(x2, gain, bias, eps, y, xhat, inv_std)
    return y.reshape(shape), xhat.reshape(shape), inv_std.reshape(shape[:-1])


def layernorm_bwd(gy, xhat, inv_std, gain):
    xhat2, shape = _rows2d(xhat)
    gy2, _ = _rows2d(np.asarray(gy, dtype=xhat2.dtype))
    inv_std2 = np.ascontiguousarray(inv_std, dtype=xhat2.dtype).reshape(-1)
    gain2 = np.ascontiguousarray(gain, dtype=xhat2.dtype)
    gx = np.empty_like(xhat2)
    ggain = np.zeros(shape[len(shape) - 1], dtype=xhat2.dtype)
    gbias = np.zeros(shape[len(shape) - 1], dtype=xhat2.dtype)
    _layernorm_bwd_impl(gy2, xhat2, inv_std2, gain2, gx, ggain, gbias)
    return gx.reshape(shape), ggain, gbias
