"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays of rank <= 4. Operations defined in
:mod:`scopeformer.ops` record themselves on the currently active :class:`Tape`
(define-by-run); calling :func:`backward` on a scalar result walks the tape in
reverse and accumulates gradients into every leaf that requires them.

Two precision modes exist globally: float32 for training and float64 for
verification (finite-difference checks are unreliable in float32).
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

MAX_RANK = 4

_default_dtype = np.float32
_debug_checks = False
_active_tape: Optional["Tape"] = None


class TensorError(ValueError):
    """Raised on shape mismatches, invalid axes and non-finite values."""


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise TensorError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype.type


@contextmanager
def use_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the global precision (float64 for verification)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def debug_checks(enabled: bool = True) -> Iterator[None]:
    """Enable NaN/Inf detection on every created tensor within the block."""
    global _debug_checks
    previous = _debug_checks
    _debug_checks = enabled
    try:
        yield
    finally:
        _debug_checks = previous


def debug_checks_enabled() -> bool:
    return _debug_checks


class Tensor:
    """Immutable-by-convention dense array with optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > MAX_RANK:
            raise TensorError(f"rank {arr.ndim} exceeds maximum of {MAX_RANK}")
        if _debug_checks and not np.all(np.isfinite(arr)):
            raise TensorError("non-finite values in tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise TensorError(
                f"gradient shape {g.shape} != tensor shape {self.data.shape}")
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Node:
    """One recorded primitive: parents plus the vjp that distributes grads."""

    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: Sequence[Tensor],
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.out = out
        self.parents = list(parents)
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations; single-owner, not thread-safe."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._previous: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._previous = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._previous
        self._previous = None


def active_tape() -> Optional[Tape]:
    return _active_tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Run without recording; forward-only inference."""
    global _active_tape
    previous = _active_tape
    _active_tape = None
    try:
        yield
    finally:
        _active_tape = previous


def record(out: Tensor, parents: Sequence[Tensor], vjp) -> Tensor:
    """Attach a backward rule to `out` if a tape is active and grads flow."""
    tape = _active_tape
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(out, parents, vjp)
        tape.nodes.append(out.node)
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`.

    Repeated calls accumulate on leaves; intermediate grads are reset per call.
    """
    tape = tape or _active_tape
    if tape is None:
        raise TensorError("backward() requires an active or explicit tape")
    if loss.data.size != 1:
        raise TensorError("backward() root must be a scalar tensor")
    for node in tape.nodes:
        if node.out is not loss:
            node.out.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.vjp(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            parent.accumulate_grad(np.asarray(pg))
    # intermediates are tape-owned; leaves keep (and accumulate) their grads
    for node in tape.nodes:
        if node.out is not loss:
            node.out.grad = None


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor],
               inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    `fn` must be scalar-valued. Runs in float64; the returned error is
    max over coordinates of |g_ad - g_fd| / max(1, |g_fd|).
    """
    with use_dtype(np.float64):
        inputs64 = [Tensor(t.data.astype(np.float64), requires_grad=True)
                    for t in inputs]
        with Tape() as tape:
            out = fn(inputs64)
            backward(out, tape)
        worst = 0.0
        for t in inputs64:
            g_ad = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            g_fd = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                with no_grad():
                    hi = fn(inputs64).item()
                flat[i] = orig - eps
                with no_grad():
                    lo = fn(inputs64).item()
                flat[i] = orig
                g_fd[i] = (hi - lo) / (2.0 * eps)
            rel = np.abs(g_ad.reshape(-1) - g_fd) / np.maximum(1.0, np.abs(g_fd))
            if rel.size:
                worst = max(worst, float(rel.max()))
    return worst
