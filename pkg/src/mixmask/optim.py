"""Adaptive moment estimation over the parameter registry's trainable groups."""

from __future__ import annotations

import numpy as np

from .autodiff import TRAINABLE_GROUPS, ParameterRegistry


class Adam:
    def __init__(self, registry: ParameterRegistry, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 group_lr: dict[str, float] | None = None):
        self.registry = registry
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.group_lr = group_lr or {}
        self.t = 0
        self._slots = {}
        for group in TRAINABLE_GROUPS:
            for name, tensor in registry.group(group):
                self._slots[name] = (group, tensor, np.zeros_like(tensor.data),
                                     np.zeros_like(tensor.data))

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, (group, tensor, m, v) in self._slots.items():
            if tensor.grad is None:
                continue
            g = tensor.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            lr = self.group_lr.get(group, self.lr)
            tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        self.registry.zero_grad()
