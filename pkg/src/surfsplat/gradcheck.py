"""Central finite-difference verification of hand-derived gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import SurfsplatError

LossAndGrad = Callable[[np.ndarray], tuple[float, np.ndarray]]


def grad_check(
    fn: LossAndGrad,
    params: np.ndarray,
    eps: float = 1e-4,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between fn's analytic gradient and central differences.

    fn maps a flat parameter vector to (loss, gradient). The relative error
    at coordinate i is |g_i - fd_i| / max(1e-8, |g_i| + |fd_i|). `indices`
    restricts the check to a coordinate subset (all coordinates by default).
    """
    params = np.asarray(params, dtype=float)
    loss0, grad = fn(params)
    if not np.isfinite(loss0):
        raise SurfsplatError("grad_check: loss is non-finite at the base point")
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError("analytic gradient shape does not match parameters")
    if indices is None:
        indices = range(params.size)
    worst = 0.0
    for i in indices:
        shift = np.zeros_like(params)
        shift[i] = eps
        lo, _ = _value(fn, params - shift)
        hi, _ = _value(fn, params + shift)
        fd = (hi - lo) / (2.0 * eps)
        err = abs(grad[i] - fd) / max(1e-8, abs(grad[i]) + abs(fd))
        worst = max(worst, err)
    return worst


def _value(fn: LossAndGrad, params: np.ndarray) -> tuple[float, np.ndarray]:
    loss, grad = fn(params)
    if not np.isfinite(loss):
        raise SurfsplatError("grad_check: loss is non-finite at a perturbed point")
    return loss, grad
