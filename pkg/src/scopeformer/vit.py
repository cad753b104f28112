"""Patch extraction, token layout handling and the transformer encoder with
its two attention variants (plain multi-head self-attention and the re-attention
form that mixes per-head score maps through a learnable head-mixing matrix).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .nn import Dense, LayerNorm, ParamModule
from .tensor import Tensor, TensorError, record

ROW_SUM_GUARD = 1e-8

CHANNEL_WISE = "channel-wise"
FEATURE_WISE = "feature-wise"


@dataclass
class TokenSequence:
    tokens: Tensor                       # (B x) S x t
    layout_tag: str = CHANNEL_WISE
    cls_present: bool = False
    cls_axis: Optional[str] = None       # "sequence" | "token-dim"


def extract_patches(x: Tensor, p: int = 1) -> Tensor:
    """Split an (B x) h x w x d map into (h*w)/p^2 flattened p x p x d patches."""
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise TensorError("patch extraction expects rank 3 or 4 input")
    xb = x.data if batched else x.data[None]
    n, h, w, d = xb.shape
    if h % p or w % p:
        raise TensorError(f"patch size {p} does not divide {h}x{w}")
    nh, nw = h // p, w // p

    def to_tokens(arr):
        blocks = arr.reshape(n, nh, p, nw, p, d).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(blocks.reshape(n, nh * nw, p * p * d))

    out_data = to_tokens(xb)
    out = Tensor(out_data if batched else out_data[0])

    def vjp(g):
        gb = g if batched else g[None]
        blocks = gb.reshape(n, nh, nw, p, p, d).transpose(0, 1, 3, 2, 4, 5)
        dx = blocks.reshape(n, h, w, d)
        return (dx if batched else dx[0],)

    return record(out, (x,), vjp)


def reassemble_patches(tokens: Tensor, h: int, w: int, p: int = 1) -> Tensor:
    """Inverse of :func:`extract_patches`; tokens back to an h x w x d map."""
    batched = tokens.data.ndim == 3
    tb = tokens.data if batched else tokens.data[None]
    n, count, width = tb.shape
    nh, nw = h // p, w // p
    if count != nh * nw or width % (p * p):
        raise TensorError("token geometry inconsistent with target map")
    d = width // (p * p)

    def to_map(arr):
        blocks = arr.reshape(n, nh, nw, p, p, d).transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(blocks.reshape(n, h, w, d))

    out_data = to_map(tb)
    out = Tensor(out_data if batched else out_data[0])

    def vjp(g):
        gb = g if batched else g[None]
        blocks = gb.reshape(n, nh, p, nw, p, d).transpose(0, 1, 3, 2, 4, 5)
        dt = blocks.reshape(n, count, width)
        return (dt if batched else dt[0],)

    return record(out, (tokens,), vjp)


def transpose_tokens(seq: TokenSequence) -> TokenSequence:
    """Swap sequence and token-dimension axes (channel-wise <-> feature-wise)."""
    flipped = FEATURE_WISE if seq.layout_tag == CHANNEL_WISE else CHANNEL_WISE
    return TokenSequence(ops.transpose2d(seq.tokens), flipped,
                         seq.cls_present, seq.cls_axis)


class PositionCls(ParamModule):
    """Trainable position table plus, optionally, a trainable CLS vector.

    cls_axis "sequence" prepends a row (baseline); "token-dim" appends a
    column (transposed configuration); None adds positions only (efficient).
    """

    def __init__(self, rng: np.random.Generator, seq_len: int, token_dim: int,
                 cls_axis: Optional[str]):
        super().__init__()
        self.seq_len, self.token_dim, self.cls_axis = seq_len, token_dim, cls_axis
        self.positions = self.add_param(
            "positions", rng.normal(scale=0.02, size=(seq_len, token_dim)))
        if cls_axis == "sequence":
            self.cls = self.add_param(
                "cls", rng.normal(scale=0.02, size=(1, token_dim)))
        elif cls_axis == "token-dim":
            self.cls = self.add_param(
                "cls", rng.normal(scale=0.02, size=(seq_len, 1)))
        elif cls_axis is None:
            self.cls = None
        else:
            raise ValueError(f"unknown cls_axis {cls_axis!r}")

    def __call__(self, seq: TokenSequence) -> TokenSequence:
        x = ops.add(seq.tokens, self.positions)
        if self.cls is None:
            return TokenSequence(x, seq.layout_tag, False, None)
        batched = x.data.ndim == 3
        cls = self.cls
        if batched:
            tile = Tensor(np.ones((x.shape[0],) + cls.shape,
                                  dtype=x.data.dtype))
            cls = ops.mul(tile, cls)
        axis = x.data.ndim - (2 if self.cls_axis == "sequence" else 1)
        parts = [cls, x] if self.cls_axis == "sequence" else [x, cls]
        return TokenSequence(ops.concat(parts, axis=axis), seq.layout_tag,
                             True, self.cls_axis)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(B x) S x t -> (B x) heads x S x (t/heads)."""
    batched = x.data.ndim == 3
    s, t = x.shape[-2], x.shape[-1]
    dk = t // heads
    if batched:
        y = ops.reshape(x, (x.shape[0], s, heads, dk))
        return ops.permute(y, (0, 2, 1, 3))
    y = ops.reshape(x, (s, heads, dk))
    return ops.permute(y, (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    batched = x.data.ndim == 4
    if batched:
        y = ops.permute(x, (0, 2, 1, 3))
        return ops.reshape(y, (y.shape[0], y.shape[1], y.shape[2] * y.shape[3]))
    y = ops.permute(x, (1, 0, 2))
    return ops.reshape(y, (y.shape[0], y.shape[1] * y.shape[2]))


class EncoderBlock(ParamModule):
    """Pre-norm transformer encoder block with selectable attention kind."""

    def __init__(self, rng: np.random.Generator, token_dim: int, heads: int,
                 mlp_dim: int, attention: str = "mhsa"):
        super().__init__()
        if token_dim % heads:
            raise ValueError(
                f"head count {heads} does not divide token dim {token_dim}")
        if attention not in ("mhsa", "mhra"):
            raise ValueError(f"unknown attention kind {attention!r}")
        self.token_dim, self.heads, self.attention = token_dim, heads, attention
        self.scale = 1.0 / np.sqrt(token_dim // heads)
        self.ln1 = self.add_child("ln1", LayerNorm(token_dim))
        self.q = self.add_child("q", Dense(rng, token_dim, token_dim))
        self.k = self.add_child("k", Dense(rng, token_dim, token_dim))
        self.v = self.add_child("v", Dense(rng, token_dim, token_dim))
        self.o = self.add_child("o", Dense(rng, token_dim, token_dim))
        if attention == "mhra":
            self.head_mix = self.add_param("head_mix", np.eye(heads))
        else:
            self.head_mix = None
        self.ln2 = self.add_child("ln2", LayerNorm(token_dim))
        self.mlp1 = self.add_child("mlp1", Dense(rng, token_dim, mlp_dim))
        self.mlp2 = self.add_child("mlp2", Dense(rng, mlp_dim, token_dim))

    def attention_scores(self, x: Tensor) -> Tensor:
        """Post-softmax (and post-mix/renorm for re-attention) score maps."""
        xn = self.ln1(x)
        q = _split_heads(self.q(xn), self.heads)
        k = _split_heads(self.k(xn), self.heads)
        kt = ops.permute(k, (0, 1, 3, 2) if k.data.ndim == 4 else (0, 2, 1))
        scores = ops.softmax(ops.matmul(q, kt), axis=-1, scale=self.scale)
        if self.attention == "mhra":
            scores = ops.head_mix_norm(scores, self.head_mix,
                                       guard=ROW_SUM_GUARD)
        return scores

    def __call__(self, x: Tensor, collect: Optional[dict] = None) -> Tensor:
        xn = self.ln1(x)
        q = _split_heads(self.q(xn), self.heads)
        k = _split_heads(self.k(xn), self.heads)
        v = _split_heads(self.v(xn), self.heads)
        kt = ops.permute(k, (0, 1, 3, 2) if k.data.ndim == 4 else (0, 2, 1))
        scores = ops.softmax(ops.matmul(q, kt), axis=-1, scale=self.scale)
        if self.attention == "mhra":
            scores = ops.head_mix_norm(scores, self.head_mix,
                                       guard=ROW_SUM_GUARD)
        if collect is not None:
            collect["scores"] = scores
        y = ops.add(x, self.o(_merge_heads(ops.matmul(scores, v))))
        z = self.mlp2(ops.gelu(self.mlp1(self.ln2(y))))
        return ops.add(y, z)


class EncoderStack(ParamModule):
    def __init__(self, rng: np.random.Generator, depth: int, token_dim: int,
                 heads: int, mlp_dim: int, attention: str = "mhsa"):
        super().__init__()
        if depth < 1:
            raise ValueError("encoder depth must be >= 1")
        self.blocks = [
            self.add_child(f"block{i}", EncoderBlock(rng, token_dim, heads,
                                                     mlp_dim, attention))
            for i in range(depth)]

    def __call__(self, x: Tensor, record_outputs: bool = False,
                 collect_attention: Optional[list] = None) -> tuple:
        """Returns (output, per-block outputs list when recording else None)."""
        recorded = [] if record_outputs else None
        for block in self.blocks:
            collect = {} if collect_attention is not None else None
            x = block(x, collect=collect)
            if collect is not None:
                collect_attention.append(collect["scores"])
            if recorded is not None:
                recorded.append(x)
        return x, recorded
