"""Analysis instruments over a frozen model: inter-encoder cosine similarity,
attention-map export and backbone feature-map export.

Images are written as binary PGM (P5, maxval 255); similarity curves as CSV.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .ingest import Sample
from .model import ScopeformerModel
from .tensor import Tensor, no_grad


@dataclass
class SimilarityCurve:
    values: list[float]                 # per-encoder similarity to the last
    cls_excluded: bool
    batch_size: int
    zero_norm_flagged: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["layer_index", "cosine_similarity"])
            for i, v in enumerate(self.values, start=1):
                writer.writerow([i, f"{v:.6f}"])


def _strip_cls(block_out: np.ndarray, model: ScopeformerModel) -> np.ndarray:
    kind = model.config.vit_kind
    if kind in ("baseline", "raw-vit"):
        return block_out[:, 1:, :]
    if kind == "tr":
        return block_out[:, :, :-1]
    return block_out


def cosine_curve(flats: list[np.ndarray]) -> tuple[list[float], bool]:
    """Batch-mean cosine similarity of each entry to the last one.

    Each entry is a (batch, features) array. The final value is 1.0 by
    definition (self-similarity); zero-norm vectors contribute 0 and raise
    the returned flag.
    """
    last = flats[-1]
    last_norm = np.linalg.norm(last, axis=1)
    values = []
    flagged = False
    for v in flats[:-1]:
        norms = np.linalg.norm(v, axis=1) * last_norm
        sims = np.zeros(v.shape[0])
        ok = norms > 0
        flagged = flagged or not ok.all()
        sims[ok] = (v[ok] * last[ok]).sum(axis=1) / norms[ok]
        values.append(float(sims.mean()))
    values.append(1.0)
    return values, flagged


def encoder_cosine_similarity(model: ScopeformerModel,
                              samples: list[Sample],
                              exclude_cls: bool = True) -> SimilarityCurve:
    """Batch-mean cosine similarity of each block's output to the last block's."""
    if not samples:
        raise ValueError("need at least one sample")
    images = np.stack([s.image for s in samples])
    with no_grad():
        _, recorded = model(Tensor(images), record_blocks=True)
    if not recorded:
        raise ValueError("no recorded block outputs")
    flats = []
    for out in recorded:
        data = out.data
        if exclude_cls:
            data = _strip_cls(data, model)
        flats.append(data.reshape(len(samples), -1).astype(np.float64))
    values, flagged = cosine_curve(flats)
    return SimilarityCurve(values, exclude_cls, len(samples), flagged)


# ---------------------------------------------------------------------------
# PGM raster I/O

def write_pgm(path, image: np.ndarray) -> None:
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    with open(path, "wb") as f:
        f.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        f.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"not a binary PGM file: {magic!r}")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        width, height = (int(v) for v in line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError("only maxval 255 supported")
        data = np.frombuffer(f.read(width * height), dtype=np.uint8)
    return data.reshape(height, width).copy()


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 8-bit; a constant map becomes mid-gray."""
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def export_attention_maps(model: ScopeformerModel, sample: Sample,
                          layers: list[int], out_dir) -> list[str]:
    """Write each selected layer's per-head post-softmax score map as PGM."""
    os.makedirs(out_dir, exist_ok=True)
    depth = len(model.encoder.blocks)
    for layer in layers:
        if not 0 <= layer < depth:
            raise IndexError(f"layer {layer} out of range [0, {depth})")
    images = sample.image[None]
    collected: list = []
    with no_grad():
        model(Tensor(images), collect_attention=collected)
    paths = []
    for layer in layers:
        scores = collected[layer].data[0]          # heads x S x S
        for head in range(scores.shape[0]):
            path = os.path.join(out_dir,
                                f"attention_layer{layer}_head{head}.pgm")
            write_pgm(path, to_gray(scores[head]))
            paths.append(path)
    return paths


def export_feature_maps(model: ScopeformerModel, sample: Sample, out_dir,
                        max_channels: int = 16) -> list[str]:
    """Tiled grids of the first K projected channels, one PGM per backbone."""
    os.makedirs(out_dir, exist_ok=True)
    images = sample.image[None]
    with no_grad():
        gfm = model.global_feature_map(Tensor(images))
    paths = []
    for i in range(len(model.backbones)):
        fmap = gfm.slice_backbone(i).data[0]       # 8 x 8 x (d/n)
        k = min(max_channels, fmap.shape[-1])
        cols = int(np.ceil(np.sqrt(k)))
        rows = int(np.ceil(k / cols))
        h, w = fmap.shape[0], fmap.shape[1]
        grid = np.full((rows * h, cols * w), 128, dtype=np.uint8)
        for c in range(k):
            r, q = divmod(c, cols)
            grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = to_gray(fmap[:, :, c])
        path = os.path.join(out_dir, f"backbone{i}_features.pgm")
        write_pgm(path, grid)
        paths.append(path)
    return paths
