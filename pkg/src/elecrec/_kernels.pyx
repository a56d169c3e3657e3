# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused loops for the element- and row-wise hot spots of the autodiff engine.

Semantics match ``_fallback`` exactly up to floating-point association.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, log, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


def scatter_add_rows(floating[:, ::1] out, const cnp.int64_t[::1] ids, const floating[:, ::1] rows):
    cdef Py_ssize_t n = ids.shape[0], d = rows.shape[1], i, j
    cdef cnp.int64_t r
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += rows[i, j]


def gelu_forward(x):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    t = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_fwd[float](x.reshape(-1), y.reshape(-1), t.reshape(-1))
    else:
        _gelu_fwd[double](x.reshape(-1), y.reshape(-1), t.reshape(-1))
    return y, t


cdef void _gelu_fwd(const floating[::1] x, floating[::1] y, floating[::1] t) noexcept nogil:
    # 0.5 * (1 + tanh(u)) == sigmoid(2u); one expf per element instead of tanh
    cdef Py_ssize_t i
    cdef floating v, s
    cdef floating c2 = <floating>(-2.0 * GELU_C), a = <floating>GELU_A
    for i in range(x.shape[0]):
        v = x[i]
        s = 1 / (1 + _exp(c2 * (v + a * v * v * v)))
        t[i] = 2 * s - 1
        y[i] = v * s


def gelu_backward(g, x, t):
    g = np.ascontiguousarray(g, dtype=x.dtype)
    x = np.ascontiguousarray(x)
    t = np.ascontiguousarray(t)
    out = np.empty_like(x)
    if x.dtype == np.float32:
        _gelu_bwd[float](g.reshape(-1), x.reshape(-1), t.reshape(-1), out.reshape(-1))
    else:
        _gelu_bwd[double](g.reshape(-1), x.reshape(-1), t.reshape(-1), out.reshape(-1))
    return out


cdef void _gelu_bwd(const floating[::1] g, const floating[::1] x, const floating[::1] t,
                    floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, th, dinner
    for i in range(x.shape[0]):
        v = x[i]
        th = t[i]
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        out[i] = <floating>(g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner))


def layer_norm_forward(x, gain, bias, double eps):
    x = np.ascontiguousarray(x)
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    gain = np.ascontiguousarray(gain, dtype=x.dtype)
    bias = np.ascontiguousarray(bias, dtype=x.dtype)
    if x.dtype == np.float32:
        _ln_fwd[float](x, gain, bias, eps, y, xhat, rstd)
    else:
        _ln_fwd[double](x, gain, bias, eps, y, xhat, rstd)
    return y, xhat, rstd


cdef void _ln_fwd(const floating[:, ::1] x, const floating[::1] gain, const floating[::1] bias, double eps,
                  floating[:, ::1] y, floating[:, ::1] xhat, floating[::1] rstd) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, r, c
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = <floating>r
        for j in range(d):
            c = (x[i, j] - mu) * r
            xhat[i, j] = <floating>c
            y[i, j] = <floating>(c * gain[j] + bias[j])


def layer_norm_backward(g, xhat, rstd, gain):
    g = np.ascontiguousarray(g, dtype=xhat.dtype)
    n, d = xhat.shape
    dx = np.empty_like(xhat)
    dgain = np.zeros(d, dtype=np.float64)
    dbias = np.zeros(d, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=xhat.dtype)
    if xhat.dtype == np.float32:
        _ln_bwd[float](g, xhat, rstd, gain, dx, dgain, dbias)
    else:
        _ln_bwd[double](g, xhat, rstd, gain, dx, dgain, dbias)
    return dx, dgain.astype(xhat.dtype), dbias.astype(xhat.dtype)


cdef void _ln_bwd(const floating[:, ::1] g, const floating[:, ::1] xhat, const floating[::1] rstd,
                  const floating[::1] gain, floating[:, ::1] dx, double[::1] dgain,
                  double[::1] dbias) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dxh = g[i, j] * gain[j]
            m1 += dxh
            m2 += dxh * xhat[i, j]
            dgain[j] += g[i, j] * xhat[i, j]
            dbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[i, j] = <floating>((g[i, j] * gain[j] - m1 - xhat[i, j] * m2) * rstd[i])


def softmax_rows(x):
    """Row softmax of a 2-D array with max subtraction."""
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    if x.dtype == np.float32:
        _softmax[float](x, y)
    else:
        _softmax[double](x, y)
    return y


cdef void _softmax(const floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef floating m, s, e, inv
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(d):
            y[i, j] = _exp(x[i, j] - m)
        s = 0
        for j in range(d):
            s += y[i, j]
        inv = 1 / s
        for j in range(d):
            y[i, j] *= inv


def softmax_rows_backward(g, y):
    g = np.ascontiguousarray(g, dtype=y.dtype)
    y = np.ascontiguousarray(y)
    out = np.empty_like(y)
    if y.dtype == np.float32:
        _softmax_bwd[float](g, y, out)
    else:
        _softmax_bwd[double](g, y, out)
    return out


cdef void _softmax_bwd(const floating[:, ::1] g, const floating[:, ::1] y, floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    cdef double s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += g[i, j] * y[i, j]
        for j in range(d):
            out[i, j] = <floating>(y[i, j] * (g[i, j] - s))


def softmax_xent(logits, targets, valid):
    logits = np.ascontiguousarray(logits)
    cdef cnp.int64_t[::1] tg = np.ascontiguousarray(targets, dtype=np.int64)
    cdef cnp.uint8_t[::1] vd = np.ascontiguousarray(valid, dtype=np.uint8)
    grad = np.empty_like(logits)
    cdef double loss
    if logits.dtype == np.float32:
        loss = _xent[float](logits, tg, vd, grad)
    else:
        loss = _xent[double](logits, tg, vd, grad)
    return loss, grad


cdef double _xent(const floating[:, ::1] x, const cnp.int64_t[::1] tg, const cnp.uint8_t[::1] vd,
                  floating[:, ::1] grad) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], v = x.shape[1], i, j
    cdef floating m, s, inv
    cdef double total = 0.0
    for i in range(n):
        if not vd[i]:
            for j in range(v):
                grad[i, j] = 0
            continue
        m = x[i, 0]
        for j in range(1, v):
            if x[i, j] > m:
                m = x[i, j]
        for j in range(v):
            grad[i, j] = _exp(x[i, j] - m)
        s = 0
        for j in range(v):
            s += grad[i, j]
        total += log(s) - (x[i, tg[i]] - m)
        inv = 1 / s
        for j in range(v):
            grad[i, j] *= inv
        grad[i, tg[i]] -= 1
    return total
