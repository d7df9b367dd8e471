"""Adam with decoupled weight decay, plus the linear learning-rate ramp."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(RuntimeError):
    """Raised when a gradient contains NaN/Inf; training must not continue."""


@dataclass
class AdamState:
    """First/second moment estimates, one pair per parameter array."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, arrays, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        )


def adam_step(arrays, grads, state, lr):
    """One optimizer step, updating ``arrays`` and ``state`` in place.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` before the
    moment update.  Raises :class:`NonFiniteGradientError` on NaN/Inf
    gradients so a diverging run aborts instead of silently corrupting
    the parameters.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ValueError("parameter/gradient/state length mismatch")
    for g in grads:
        if not np.isfinite(g).all():
            raise NonFiniteGradientError("non-finite gradient encountered")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for theta, g, m, v in zip(arrays, grads, state.m, state.v):
        if state.weight_decay:
            theta -= lr * state.weight_decay * theta
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return arrays, state


def lr_schedule(step, total_steps, lr_start=2e-3, lr_end=2e-5):
    """Linear anneal from ``lr_start`` at step 0 to ``lr_end`` at the end."""
    if step < 0 or step > max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps <= 0:
        return lr_start
    frac = step / total_steps
    return lr_start + (lr_end - lr_start) * frac
