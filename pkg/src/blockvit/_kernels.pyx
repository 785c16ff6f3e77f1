# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused row-wise kernels: softmax, layer norm and tanh-GELU, forward and backward.

Every kernel takes 2-D C-contiguous arrays whose rows are independent
(tokens); callers flatten leading axes first. Signatures match
``blockvit._kernels_py`` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715


cdef inline double _tanh(double u) noexcept nogil:
    # exp form: faster than libm tanh, saturates correctly at +-inf
    return 1.0 - 2.0 / (1.0 + exp(2.0 * u))


def softmax_fwd(real[:, ::1] x, double inv_temp):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double m, s, v
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                v = exp((x[i, j] - m) * inv_temp)
                out[i, j] = <real>v
                s += v
            for j in range(d):
                out[i, j] = <real>(out[i, j] / s)
    return out_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy, double inv_temp):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += dy[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = <real>(inv_temp * y[i, j] * (dy[i, j] - dot))
    return out_arr


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.asarray(x).dtype
    out_arr = np.empty((n, d), dtype=dt)
    xhat_arr = np.empty((n, d), dtype=dt)
    rstd_arr = np.empty(n, dtype=dt)
    cdef real[:, ::1] out = out_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
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
            rstd[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = <real>c
                out[i, j] = <real>(c * gamma[j] + beta[j])
    return out_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dt = np.asarray(dy).dtype
    dx_arr = np.empty((n, d), dtype=dt)
    dg_arr = np.zeros(d, dtype=np.float64)
    db_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double m1, m2, g
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                g = dy[i, j] * gamma[j]
                m1 += g
                m2 += g * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = <real>(rstd[i] * (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2))
    return dx_arr, dg_arr.astype(dt), db_arr.astype(dt)


def gelu_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = <real>(0.5 * v * (1.0 + _tanh(GELU_C * (v + GELU_A * v * v * v))))
    return out_arr


def gelu_bwd(real[:, ::1] x, real[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = np.empty((n, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef double v, t, dt
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = _tanh(GELU_C * (v + GELU_A * v * v * v))
                dt = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
                out[i, j] = <real>(dy[i, j] * dt)
    return out_arr
