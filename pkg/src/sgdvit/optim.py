"""SGD with momentum, plus the two learning-rate schedules exposed in config."""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import Tensor


class SGD:
    """v <- momentum * v + grad; param <- param - lr * v; grads cleared."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                raise StateError(f"sgd_step: parameter {p.name or '<unnamed>'} has no gradient")
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(iteration: int, total: int, schedule: str, lr: float,
          lr_start: float, lr_end: float) -> float:
    """Learning rate for one iteration.

    ``constant`` uses ``lr`` throughout; ``log`` interpolates from
    ``lr_start`` to ``lr_end`` geometrically over ``total`` iterations.
    """
    if schedule == "constant":
        return lr
    if schedule == "log":
        if total <= 1:
            return lr_start
        t = iteration / (total - 1)
        return float(np.exp(np.log(lr_start) * (1 - t) + np.log(lr_end) * t))
    raise ValueError(f"unknown lr schedule {schedule!r}")
