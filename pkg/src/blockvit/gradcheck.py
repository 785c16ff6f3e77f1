"""Finite-difference gradient checks along random directions.

Each probe draws a random unit direction ``v`` over the checked tensors
and compares the analytic directional derivative ``<grad, v>`` with a
fourth-order central difference of the loss. Directional probes avoid the
near-zero single coordinates that make elementwise relative errors noisy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import no_grad


@dataclass
class GradcheckResult:
    max_rel_err: float
    probes: int
    errors: list

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def gradcheck(loss_fn, params, probes: int = 50, h: float = 1e-3, seed: int = 0) -> GradcheckResult:
    """Check ``loss_fn()`` (a scalar Tensor) against its gradients w.r.t. ``params``.

    ``params`` are Tensors with ``requires_grad``; their ``.data`` is
    perturbed in place and restored.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    originals = [p.data.copy() for p in params]

    def f_at(direction, step):
        for p, o, d in zip(params, originals, direction):
            p.data[...] = o + step * d
        with no_grad():
            return float(loss_fn().item())

    errors = []
    try:
        for _ in range(probes):
            direction = [rng.standard_normal(p.shape) for p in params]
            norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
            direction = [d / norm for d in direction]
            analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
            numeric = (-f_at(direction, 2 * h) + 8 * f_at(direction, h) - 8 * f_at(direction, -h)
                       + f_at(direction, -2 * h)) / (12 * h)
            scale = max(abs(analytic), abs(numeric), 1e-12)
            errors.append(abs(analytic - numeric) / scale)
    finally:
        for p, o in zip(params, originals):
            p.data[...] = o
    return GradcheckResult(max(errors) if errors else 0.0, probes, errors)


__all__ = ["GradcheckResult", "gradcheck"]
