"""Momentum SGD."""

from __future__ import annotations

from typing import Mapping, MutableMapping, Optional

import numpy as np

from .engine import Tensor


def sgd_momentum_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    velocity: Optional[MutableMapping[str, np.ndarray]],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> MutableMapping[str, np.ndarray]:
    """One in-place update ``v = m*v - lr*(g + wd*p); p += v``.

    ``velocity`` may be ``None`` on the first call; the (possibly new)
    velocity mapping is returned. Parameters without a gradient entry are
    left untouched.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight decay must be nonnegative, got {weight_decay}")
    if velocity is None:
        velocity = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        step = g + weight_decay * p.data if weight_decay else g
        v *= momentum
        v -= lr * step
        p.data += v
    return velocity


class SGD:
    """Stateful wrapper holding the velocity buffers for one parameter set."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        sgd_momentum_step(self.params, grads, self.velocity, self.lr, self.momentum,
                          self.weight_decay)
