"""Lightweight parameter containers shared by all model components.

A :class:`ParamModule` owns named parameter tensors and child modules; the
flattened registry (`parameters()`) is the single source of truth for
optimizers, checkpoints, freeze policies and parameter accounting.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


class ParamModule:
    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "ParamModule"] = {}

    def add_param(self, name: str, value: np.ndarray,
                  trainable: bool = True) -> Tensor:
        t = Tensor(np.asarray(value, dtype=default_dtype()),
                   requires_grad=trainable)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "ParamModule") -> "ParamModule":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(t.size for _, t in self.named_parameters()
                   if t.requires_grad or not trainable_only)

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Dense(ParamModule):
    """Affine layer acting on the last axis."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = self.add_param(
            "weight", fan_in_uniform(rng, (in_dim, out_dim), in_dim))
        self.bias = self.add_param("bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        flat_rank2 = x.data.ndim == 2
        if flat_rank2:
            return ops.add(ops.matmul(x, self.weight), self.bias)
        # fold leading axes into one batch axis for the product
        lead = x.shape[:-1]
        folded = ops.reshape(x, (int(np.prod(lead)), self.in_dim))
        y = ops.add(ops.matmul(folded, self.weight), self.bias)
        return ops.reshape(y, lead + (self.out_dim,))


class LayerNorm(ParamModule):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(dim))
        self.beta = self.add_param("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, eps=self.eps)
