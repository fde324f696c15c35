"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient.  Returns ``(params, state)``.
    """
    b1, b2 = betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                             f"parameter has {p.data.shape}", name)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def cosine_lr(base_lr: float, step: int, total: int, floor: float = 0.05) -> float:
    """Cosine decay from ``base_lr`` at step 0 to ``floor * base_lr`` at the last step."""
    if total <= 1:
        return base_lr
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))
