"""Pure-numpy versions of the fused kernels in ``_kernels.pyx``.

Same signatures, same math; used when the compiled module is unavailable
or when ``BLOCKVIT_PURE_PYTHON=1`` is set.
"""

import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def softmax_fwd(x, inv_temp):
    z = (x - x.max(axis=1, keepdims=True)) * inv_temp
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_bwd(y, dy, inv_temp):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return (inv_temp * y * (dy - dot)).astype(y.dtype, copy=False)


def layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = c * rstd
    out = xhat * gamma + beta
    dt = x.dtype
    return out.astype(dt, copy=False), xhat.astype(dt, copy=False), rstd[:, 0].astype(dt, copy=False)


def layer_norm_bwd(dy, xhat, rstd, gamma):
    g = dy * gamma
    d = dy.shape[1]
    m1 = g.sum(axis=1, keepdims=True) / d
    m2 = (g * xhat).sum(axis=1, keepdims=True) / d
    dx = rstd[:, None] * (g - m1 - xhat * m2)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dt = dy.dtype
    return dx.astype(dt, copy=False), dgamma.astype(dt, copy=False), dbeta.astype(dt, copy=False)


def gelu_fwd(x):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    return (0.5 * x * (1.0 + t)).astype(x.dtype, copy=False)


def gelu_bwd(x, dy):
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return (dy * d).astype(x.dtype, copy=False)
