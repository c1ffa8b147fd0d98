"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """One in-place update: ``v = m*v + g + wd*p``; ``p -= lr*v``; grads are cleared.

    Every parameter must carry a gradient; a parameter that took no part in
    the loss should be left out of ``params`` rather than passed without one.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"sgd_step: no gradient for {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, p in params.items():
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state.velocity[name] = v
        elif v.shape != p.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != parameter shape {p.shape} for {name}")
        v *= state.momentum
        v += p.grad
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data -= p.data.dtype.type(state.learning_rate) * v
        p.grad = None


class SGD:
    """Convenience wrapper binding a parameter dict to an :class:`OptimizerState`."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.state = OptimizerState(lr, momentum, weight_decay)

    @property
    def lr(self) -> float:
        return self.state.learning_rate

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.learning_rate = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, self.state)
