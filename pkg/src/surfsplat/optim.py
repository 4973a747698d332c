"""Bias-corrected adaptive-moment gradient descent on flat parameter vectors.

adam_step is pure: it returns a new parameter vector and a new state, so
optimization loops replaying identical inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteGradientError


@dataclass(frozen=True)
class AdamState:
    name: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: np.ndarray = None  # first-moment accumulator
    v: np.ndarray = None  # second-moment accumulator

    @classmethod
    def fresh(cls, name: str, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> "AdamState":
        return cls(name=name, lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=np.zeros(size), v=np.zeros(size))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise ValueError(f"{state.name}: params shape {params.shape} != grads shape {grads.shape}")
    if state.m.shape != params.shape:
        raise ValueError(f"{state.name}: state accumulators do not match parameter shape")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError(state.name)
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=t, m=m, v=v)
