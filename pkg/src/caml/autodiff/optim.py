"""SGD with momentum and weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def sgd_step(params, state: OptimizerState, grads=None):
    """One step: ``v <- mu*v + g + wd*theta``; ``theta <- theta - lr*v``.

    ``params`` maps names to tensors; gradients come from ``tensor.grad``
    unless ``grads`` (same keys) is given.
    """
    mu, wd, lr = state.momentum, state.weight_decay, state.lr
    for name, p in params.items():
        g = p.grad if grads is None else grads[name]
        if g is None:
            continue
        if g.shape != p.value.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != parameter {p.value.shape} for {name}")
        d = g + wd * p.value if wd else g
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p.value)
            state.buffers[name] = buf
        elif buf.shape != p.value.shape:
            raise ValueError(f"sgd_step: momentum buffer shape mismatch for {name}")
        buf *= mu
        buf += d
        p.value -= lr * buf


def zero_grads(params):
    for p in params.values():
        p.zero_grad()
