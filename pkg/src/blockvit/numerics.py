"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every primitive applied to a tensor
that (transitively) requires a gradient records a node holding the saved
inputs its adjoint needs. :func:`backward` collects the nodes reachable
from a scalar loss into a :class:`ComputationTape` and replays their
adjoints in reverse recording order. Gradients accumulate on leaves that
have ``requires_grad=True``; repeated backward passes add up.

Training runs in 32-bit by default; oracle tests switch to 64-bit with
:func:`precision`.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError, LabelError

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ = itertools.count()


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise DomainError(f"unsupported precision {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default floating dtype."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation, EMA updates, optimizer steps)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class _Node:
    __slots__ = ("seq", "out_id", "inputs", "adjoint", "op")

    def __init__(self, out_id, inputs, adjoint, op):
        self.seq = next(_SEQ)
        self.out_id = out_id
        self.inputs = inputs
        self.adjoint = adjoint
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    """Coerce operands; plain numbers adopt the tensor operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _record(out_data, inputs, adjoint, op) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(id(out), tuple(inputs), adjoint, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class ComputationTape:
    """Nodes reachable from an output, ordered by recording sequence."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationTape":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def replay(self, out: Tensor, seed: np.ndarray) -> dict:
        """Run adjoints in reverse order; returns {id(leaf): (leaf, grad)}."""
        grads = {id(out): seed}
        leaves = {}
        if out._node is None:
            leaves[id(out)] = (out, seed)
            return leaves
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.adjoint(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    prev = leaves.get(id(t))
                    leaves[id(t)] = (t, gi if prev is None else prev[1] + gi)
                else:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
        return leaves


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires a gradient."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.from_output(loss)
    seed = np.ones(loss.shape, dtype=loss.dtype)
    for t, g in tape.replay(loss, seed).values():
        if not t.requires_grad:
            continue
        g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def adj(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record(out, (a, b), adj, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def adj(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), adj, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    shape = a.shape

    def adj(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), adj, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dt = a.shape, a.dtype

    basic = all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def adj(g):
        full = np.zeros(shape, dtype=dt)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), adj, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def adj(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, adj, "concat")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def adj(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), adj, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# fused primitives (backed by the kernel module)
# ---------------------------------------------------------------------------


def _to_last(arr, axis):
    return arr if axis in (-1, arr.ndim - 1) else np.moveaxis(arr, axis, -1)


def _from_last(arr, axis):
    return arr if axis in (-1, arr.ndim - 1) else np.moveaxis(arr, -1, axis)


def softmax(x, axis=-1, temperature: float = 1.0) -> Tensor:
    """``exp((x - max) / T)`` normalized along ``axis``."""
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    inv_t = 1.0 / temperature
    y_last = kernels.softmax_fwd(_to_last(x.data, axis), inv_t)

    def adj(g):
        return (_from_last(kernels.softmax_bwd(y_last, _to_last(g, axis), inv_t), axis),)

    return _record(_from_last(y_last, axis), (x,), adj, "softmax")


def log_softmax(x, axis=-1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    x = as_tensor(x)
    z = x.data / np.asarray(temperature, dtype=x.dtype)
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def adj(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _record(out, (x,), adj, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over the last axis followed by ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match axis length {d}")
    if not eps > 0:
        raise DomainError("layer_norm eps must be > 0")
    out, xhat, rstd = kernels.layer_norm_fwd(x.data, gamma.data, beta.data, eps)
    gd = gamma.data

    def adj(g):
        dx, dg, db = kernels.layer_norm_bwd(g, xhat, rstd, gd)
        return dx, dg, db

    return _record(out, (x, gamma, beta), adj, "layer_norm")


GELU_CONSTANT = kernels._kernels_py.GELU_C
"""sqrt(2/pi), the scale in the tanh approximation
``gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(xd, g),), "gelu")


def l2_normalize(x, axis=-1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = sqrt(add(tsum(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, norm)


def cross_entropy(logits, targets, class_weights=None) -> Tensor:
    """Mean over the batch of ``w[y] * -log softmax(logits)[y]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    b, c = logits.shape
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if y.shape[0] != b:
        raise DimensionError(f"{y.shape[0]} targets for {b} logits rows")
    if np.any(y < 0) or np.any(y >= c):
        raise LabelError(f"targets must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    w = np.ones(c, dtype=logits.dtype) if class_weights is None else np.asarray(
        getattr(class_weights, "data", class_weights), dtype=logits.dtype
    )
    if w.shape != (c,):
        raise DimensionError(f"class_weights shape {w.shape} does not match {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    wy = w[y]
    loss = np.asarray(-(wy * logp[rows, y]).mean(), dtype=logits.dtype)

    def adj(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return ((grad * (wy / b)[:, None]) * g,)

    return _record(loss, (logits,), adj, "cross_entropy")
