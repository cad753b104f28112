"""Feature-extraction backbone: a family of small CNNs, per-backbone 1x1
projection, spatial alignment to 8x8 and channel-wise concatenation into the
global feature map, plus the prefix freeze policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import ParamModule, fan_in_uniform
from .tensor import Tensor

TARGET_SPATIAL = 8

# arch_id -> per-stage output channels (each stage downsamples by 2)
ARCH_CATALOG = {
    "t3a": (16, 32, 64),
    "t3b": (24, 40, 56),
    "t3c": (32, 48, 64),
    "t3d": (16, 48, 96),
}


@dataclass(frozen=True)
class BackboneSpec:
    arch_id: str = "t3a"
    init_seed: int = 0
    pretrain_tag: str = "none"          # "none" | "task-pretrained"
    frozen_fraction: float = 0.0
    feature_width: int = 2048           # channels after the widening 1x1

    def __post_init__(self):
        if self.arch_id not in ARCH_CATALOG:
            raise ValueError(f"unknown arch_id {self.arch_id!r}")
        if not 0.0 <= self.frozen_fraction <= 1.0:
            raise ValueError("frozen_fraction must lie in [0, 1]")
        if self.pretrain_tag not in ("none", "task-pretrained"):
            raise ValueError(f"unknown pretrain_tag {self.pretrain_tag!r}")


class ToyCnn(ParamModule):
    """Stack of stride-2 3x3 conv stages followed by a widening 1x1 conv."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.init_seed)
        self.stage_channels = ARCH_CATALOG[spec.arch_id]
        cin = 3
        self.stages = []
        for i, cout in enumerate(self.stage_channels):
            w = self.add_param(f"stage{i}.kernel",
                               fan_in_uniform(rng, (3, 3, cin, cout), 9 * cin))
            b = self.add_param(f"stage{i}.bias", np.zeros(cout))
            self.stages.append((w, b))
            cin = cout
        self.widen_kernel = self.add_param(
            "widen.kernel",
            fan_in_uniform(rng, (1, 1, cin, spec.feature_width), cin))
        self.widen_bias = self.add_param(
            "widen.bias", np.zeros(spec.feature_width))
        self.out_channels = spec.feature_width

    def __call__(self, image: Tensor) -> Tensor:
        x = image
        for w, b in self.stages:
            x = ops.relu(ops.add(ops.conv2d(x, w, stride=2, padding="same"), b))
        x = ops.relu(ops.add(ops.conv2d(x, self.widen_kernel), self.widen_bias))
        return x


class Projection1x1(ParamModule):
    """Trainable 1x1 conv mapping backbone features to d/n channels.

    Always stays trainable, even under a full backbone freeze.
    """

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 out_channels: int):
        super().__init__()
        self.kernel = self.add_param(
            "kernel", fan_in_uniform(rng, (1, 1, in_channels, out_channels),
                                     in_channels))
        self.bias = self.add_param("bias", np.zeros(out_channels))

    def __call__(self, features: Tensor) -> Tensor:
        return ops.add(ops.conv2d(features, self.kernel), self.bias)


def align_spatial(features: Tensor, target: int = TARGET_SPATIAL) -> Tensor:
    """Adaptive average pooling to target x target; identity when already there."""
    h, w = features.shape[-3], features.shape[-2]
    if h < target or w < target:
        raise ValueError(
            f"feature map {h}x{w} smaller than target {target}x{target}; "
            "upsampling is not supported")
    if h == target and w == target:
        return features
    return ops.pool_adaptive_avg(features, target, target)


@dataclass
class GlobalFeatureMap:
    tensor: Tensor                      # (... x) 8 x 8 x d
    channel_offsets: tuple              # per-backbone start offsets, then d

    def slice_backbone(self, index: int) -> Tensor:
        start = self.channel_offsets[index]
        length = self.channel_offsets[index + 1] - start
        return ops.narrow(self.tensor, self.tensor.data.ndim - 1, start, length)


def build_global_feature_map(projected: list[Tensor]) -> GlobalFeatureMap:
    """Concatenate aligned projected maps along channels, recording offsets."""
    if not projected:
        raise ValueError("need at least one backbone feature map")
    spatial = projected[0].shape[:-1]
    for t in projected:
        if t.shape[:-1] != spatial:
            raise ValueError("spatial extents differ across backbones")
    widths = [t.shape[-1] for t in projected]
    offsets = tuple(np.cumsum([0] + widths).tolist())
    tensor = ops.concat(projected, axis=projected[0].data.ndim - 1)
    return GlobalFeatureMap(tensor, offsets)


def apply_freeze_policy(module: ParamModule, frozen_fraction: float,
                        never_freeze: tuple = ()) -> dict[str, bool]:
    """Freeze the smallest registry-order prefix reaching the target share.

    Returns the resulting name -> trainable map. Parameters whose names start
    with any `never_freeze` prefix are skipped and always stay trainable.
    """
    if not 0.0 <= frozen_fraction <= 1.0:
        raise ValueError("frozen_fraction must lie in [0, 1]")
    params = [(name, t) for name, t in module.named_parameters()
              if not any(name.startswith(p) for p in never_freeze)]
    total = sum(t.size for _, t in params)
    target = frozen_fraction * total
    frozen = 0
    for name, t in params:
        if frozen_fraction > 0.0 and frozen < target:
            t.requires_grad = False
            frozen += t.size
        else:
            t.requires_grad = True
    return {name: t.requires_grad for name, t in module.named_parameters()}
