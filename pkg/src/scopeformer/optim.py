"""Adaptive-moment gradient descent over a parameter registry.

Frozen parameters (requires_grad False) are never touched; their bytes stay
identical across any number of steps.
"""

from __future__ import annotations

import numpy as np

from .nn import ParamModule


class Adam:
    def __init__(self, module: ParamModule, learning_rate: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.module = module
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, p in self.module.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - self.lr * update

    def zero_grad(self) -> None:
        self.module.zero_grad()
