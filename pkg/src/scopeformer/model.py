"""End-to-end model assembly: backbones -> global feature map -> token layout
-> encoder stack -> classification head, for all four pipeline kinds
(baseline, transposed, efficient, and the no-backbone raw-ViT mode).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .backbone import (BackboneSpec, GlobalFeatureMap, Projection1x1, ToyCnn,
                       align_spatial, apply_freeze_policy,
                       build_global_feature_map)
from .config import ScopeformerConfig
from .heads import ClsHead, EfficientHead
from .nn import ParamModule
from .tensor import Tensor
from .vit import (EncoderStack, PositionCls, TokenSequence, extract_patches,
                  transpose_tokens, CHANNEL_WISE)


def encoder_block_param_count(token_dim: int, mlp_dim: int, heads: int,
                              attention: str) -> int:
    """Closed-form per-block parameter count, independent of the registry."""
    t, m = token_dim, mlp_dim
    count = 4 * t * t + 4 * t          # q/k/v/out projections with biases
    count += 2 * (2 * t)               # two layer norms
    count += 2 * t * m + m + t         # mlp in/out with biases
    if attention == "mhra":
        count += heads * heads
    return count


class ScopeformerModel(ParamModule):
    def __init__(self, config: ScopeformerConfig):
        super().__init__()
        self.config = config.validate()
        seeds = np.random.SeedSequence(config.seed).spawn(4)
        rng_backbone = np.random.default_rng(seeds[0])
        rng_proj = np.random.default_rng(seeds[1])
        rng_vit = np.random.default_rng(seeds[2])
        rng_head = np.random.default_rng(seeds[3])

        self.backbones: list[ToyCnn] = []
        self.projections: list[Projection1x1] = []
        if config.vit_kind != "raw-vit":
            archs = [a.strip() for a in config.backbone_archs.split(",") if a.strip()]
            per_width = config.d // config.n_backbones
            for i in range(config.n_backbones):
                spec = BackboneSpec(
                    arch_id=archs[i % len(archs)],
                    init_seed=int(rng_backbone.integers(2 ** 31)),
                    pretrain_tag="task-pretrained" if config.pretrain_backbone
                    else "none",
                    frozen_fraction=config.frozen_fraction,
                    feature_width=config.backbone_feature_width)
                cnn = self.add_child(f"backbone{i}", ToyCnn(spec))
                proj = self.add_child(
                    f"projection{i}",
                    Projection1x1(rng_proj, cnn.out_channels, per_width))
                self.backbones.append(cnn)
                self.projections.append(proj)

        self.poscls = self.add_child(
            "poscls", PositionCls(rng_vit, self._pos_rows(), self._pos_cols(),
                                  config.resolved_cls_axis))
        self.encoder = self.add_child(
            "encoder", EncoderStack(rng_vit, config.layers, config.token_dim,
                                    config.heads, config.mlp_dim,
                                    config.attention))
        if config.vit_kind == "efficient":
            self.head: ParamModule = self.add_child(
                "head", EfficientHead(rng_head, config.d))
        else:
            hidden = config.head_hidden or None
            in_dim = (config.token_dim if config.vit_kind in ("baseline", "raw-vit")
                      else config.d)
            self.head = self.add_child("head",
                                       ClsHead(rng_head, in_dim, hidden))
        self.apply_freeze()

    def _pos_rows(self) -> int:
        cfg = self.config
        if cfg.vit_kind in ("baseline", "raw-vit"):
            return cfg.n_tokens
        return cfg.d

    def _pos_cols(self) -> int:
        cfg = self.config
        if cfg.vit_kind in ("baseline", "raw-vit"):
            return cfg.token_dim
        return cfg.n_tokens

    def apply_freeze(self, frozen_fraction: Optional[float] = None) -> None:
        for cnn in self.backbones:
            fraction = (cnn.spec.frozen_fraction if frozen_fraction is None
                        else frozen_fraction)
            apply_freeze_policy(cnn, fraction)

    # ---- forward stages ---------------------------------------------------
    def global_feature_map(self, images: Tensor) -> GlobalFeatureMap:
        if self.config.vit_kind == "raw-vit":
            raise ValueError("raw-vit mode has no backbone feature map")
        projected = []
        for cnn, proj in zip(self.backbones, self.projections):
            features = align_spatial(cnn(images))
            projected.append(proj(features))
        return build_global_feature_map(projected)

    def tokens(self, images: Tensor) -> TokenSequence:
        cfg = self.config
        if cfg.vit_kind == "raw-vit":
            seq = TokenSequence(extract_patches(images, cfg.patch),
                                CHANNEL_WISE)
        else:
            gfm = self.global_feature_map(images)
            seq = TokenSequence(extract_patches(gfm.tensor, cfg.patch),
                                CHANNEL_WISE)
        if cfg.vit_kind in ("tr", "efficient"):
            seq = transpose_tokens(seq)
        return self.poscls(seq)

    def __call__(self, images, record_blocks: bool = False,
                 collect_attention: Optional[list] = None):
        """Forward to class probabilities.

        Returns (probs, recorded_block_outputs) where the second entry is
        None unless `record_blocks` is set.
        """
        if not isinstance(images, Tensor):
            images = Tensor(images)
        cfg = self.config
        seq = self.tokens(images)
        out, recorded = self.encoder(seq.tokens, record_outputs=record_blocks,
                                     collect_attention=collect_attention)
        batched = out.data.ndim == 3
        if cfg.vit_kind in ("baseline", "raw-vit"):
            cls = ops.narrow(out, out.data.ndim - 2, 0, 1)
            cls = ops.reshape(cls, (out.shape[0], cfg.token_dim) if batched
                              else (cfg.token_dim,))
            probs = self.head(cls)
        elif cfg.vit_kind == "tr":
            cls = ops.narrow(out, out.data.ndim - 1, out.shape[-1] - 1, 1)
            cls = ops.reshape(cls, (out.shape[0], cfg.d) if batched
                              else (cfg.d,))
            probs = self.head(cls)
        else:
            probs = self.head(out)
        return probs, recorded


def assemble_pipeline(config: ScopeformerConfig) -> ScopeformerModel:
    return ScopeformerModel(config)
