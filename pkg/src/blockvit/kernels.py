"""Kernel backend selection.

The compiled Cython module is used when it imports cleanly; otherwise the
numpy implementation is used. Set ``BLOCKVIT_PURE_PYTHON=1`` to force the
fallback (the benchmark and the parity tests do this).
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("BLOCKVIT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1])


def softmax_fwd(x, inv_temp):
    return _impl.softmax_fwd(_rows(x), float(inv_temp)).reshape(x.shape)


def softmax_bwd(y, dy, inv_temp):
    return _impl.softmax_bwd(_rows(y), _rows(dy.astype(y.dtype, copy=False)), float(inv_temp)).reshape(y.shape)


def layer_norm_fwd(x, gamma, beta, eps):
    out, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gamma, dtype=x.dtype), np.ascontiguousarray(beta, dtype=x.dtype), float(eps)
    )
    return out.reshape(x.shape), xhat, rstd


def layer_norm_bwd(dy, xhat, rstd, gamma):
    """Returns (dx with dy's shape, dgamma, dbeta); xhat/rstd are the 2-D forward caches."""
    dx, dg, db = _impl.layer_norm_bwd(
        _rows(dy.astype(xhat.dtype, copy=False)), xhat, rstd, np.ascontiguousarray(gamma, dtype=xhat.dtype)
    )
    return dx.reshape(dy.shape), dg, db


def gelu_fwd(x):
    return _impl.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_bwd(x, dy):
    return _impl.gelu_bwd(_rows(x), _rows(dy.astype(x.dtype, copy=False))).reshape(x.shape)
