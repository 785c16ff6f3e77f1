"""AdamW and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import OptimizerError, ScheduleError


def lr_at_step(step: int, warmup: int, total: int, peak: float, floor: float = 0.0) -> float:
    """Linear 0 -> peak over ``[0, warmup]``, then cosine peak -> floor over ``[warmup, total]``."""
    if step < 0 or step > total:
        raise ScheduleError(f"step {step} outside [0, {total}]")
    if warmup > total:
        raise ScheduleError(f"warmup {warmup} exceeds total {total}")
    if step < warmup:
        return peak * step / warmup
    if total == warmup:
        return peak
    progress = (step - warmup) / (total - warmup)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * progress))


def cosine_momentum(step: int, total: int, base: float, final: float = 1.0) -> float:
    """EMA momentum rising from ``base`` to ``final`` along a half cosine."""
    if total <= 0:
        return base
    return final - (final - base) * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


@dataclass
class AdamWState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamWState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamWState, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05, decay_mask=None):
    """One AdamW update with bias correction and decoupled weight decay.

    Parameters whose ``requires_grad`` is false, or whose gradient is None,
    are left untouched.
    """
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise OptimizerError("params, grads and optimizer state differ in length")
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise OptimizerError(f"shape mismatch for parameter {i}: param {p.shape}, grad {g.shape}, state {state.m[i].shape}")
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        if wd:
            p.data *= 1.0 - lr * wd
        step = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data -= (lr * step).astype(p.dtype, copy=False)


@dataclass
class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a fixed parameter list.

    Biases, norms, and 1-D tensors are excluded from weight decay.
    """

    params: list
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    state: AdamWState = field(init=False)

    def __post_init__(self):
        self.state = AdamWState.for_params(self.params)
        self.decay_mask = [p.ndim >= 2 for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        with nx.no_grad():
            adamw_step(
                self.params, [p.grad for p in self.params], self.state, lr,
                self.beta1, self.beta2, self.eps, self.weight_decay, self.decay_mask,
            )
