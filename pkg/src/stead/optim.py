"""AdamW with decoupled weight decay, and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError


@dataclass
class OptimState:
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.2
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **hyper) -> "OptimState":
        state = cls(**hyper)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float) -> tuple[dict, OptimState]:
    """One bias-corrected Adam update plus decoupled decay ``lr * wd * theta``.

    Inputs are left untouched; new parameter and moment dicts are returned.
    Parameters without a gradient entry are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}; step rejected")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params[name] = (p - lr * update - lr * state.weight_decay * p).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = OptimState(
        state.lr_base, state.beta1, state.beta2, state.eps, state.weight_decay, t, new_m, new_v
    )
    return new_params, new_state


def cosine_lr(step: int, total_steps: int, lr_base: float) -> float:
    """``lr_base * (1 + cos(pi * step / total)) / 2``; 0 past the end."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    step = max(step, 0)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
