"""Momentum SGD."""

from __future__ import annotations

import math
from typing import Dict, Hashable, Optional, Tuple

import numpy as np


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """One momentum-SGD update; returns ``(new_param, new_velocity)``.

    ``v <- momentum * v + (grad + weight_decay * param)`` and ``param <- param - lr * v``.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameter shape {param.shape}")
    g = grad + weight_decay * param if weight_decay else grad
    v = g if velocity is None else momentum * velocity + g
    new = (param - lr * v).astype(param.dtype, copy=False)
    return new, np.asarray(v, dtype=param.dtype)


class SGD:
    """Stateful wrapper applying :func:`sgd_step` in place to named arrays."""

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[Hashable, np.ndarray] = {}

    def step(self, params: Dict[Hashable, np.ndarray], grads: Dict[Hashable, np.ndarray], lr: Optional[float] = None) -> None:
        missing = set(params) - set(grads)
        if missing:
            raise ValueError(f"no gradient for parameters {sorted(map(str, missing))}")
        rate = self.lr if lr is None else lr
        for key, p in params.items():
            new, v = sgd_step(p, grads[key], rate, self.momentum, self.weight_decay, self.velocity.get(key))
            p[...] = new
            self.velocity[key] = v


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` at step 0 toward zero at ``total``."""
    if total <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
