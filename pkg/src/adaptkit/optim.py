"""SGD with momentum and selective weight decay, plus lr schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor

# Decay is skipped for biases and batchnorm affine parameters.
_NO_DECAY_SUFFIXES = (".bias", ".gamma", ".beta")


def decays(param: Tensor) -> bool:
    return not param.name.endswith(_NO_DECAY_SUFFIXES)


class SGD:
    """v <- momentum*v + grad + wd*param;  param <- param - lr*v."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ConfigError("learning rate must be non-negative")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ConfigError(f"step() before backward: {p.name or 'parameter'} has no grad")
            g = p.grad
            if self.weight_decay and decays(p):
                g = g + self.weight_decay * p.data
            self.velocity[i] = self.momentum * self.velocity[i] + g
            p.data = p.data - lr * self.velocity[i]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


@dataclass(frozen=True)
class Schedule:
    """Constant or cosine-annealed learning rate over a fixed step budget."""

    kind: str  # "constant" | "cosine"
    base_lr: float
    min_lr: float = 0.0
    total_steps: int = 1

    def lr_at(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ConfigError(f"step {step} outside [0, {self.total_steps}]")
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "cosine":
            frac = step / self.total_steps
            return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1 + np.cos(np.pi * frac))
        raise ConfigError(f"unknown schedule kind {self.kind!r}")
