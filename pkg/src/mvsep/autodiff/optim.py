"""Adam optimizer on plain numpy parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, NonFiniteError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, scale: float = 1.0):
    """One Adam descent step, applied to ``params`` in place.

    ``scale`` multiplies the final displacement (used for backtracking).
    Non-finite gradients leave both parameters and state untouched and raise
    :class:`NonFiniteError`.

    Returns:
        list of the displacements that were added to each parameter.
    """
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient, Adam update rejected")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for p, m in zip(params, state.m):
        if p.shape != m.shape:
            raise DimensionError("Adam moments do not match parameter shapes")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    deltas = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        delta = -scale * state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        p += delta
        deltas.append(delta)
    return deltas


class Adam:
    """Stateful wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads):
        return adam_step(self.params, grads, self.state)
