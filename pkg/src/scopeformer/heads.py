"""Classification heads, the weighted multi-label log loss and evaluation
metrics for the six-class hemorrhage labeling task.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .ingest import NUM_CLASSES
from .nn import Dense, ParamModule
from .tensor import Tensor
from .vit import reassemble_patches

DEFAULT_ALPHA = (2.0, 1.0, 1.0, 1.0, 1.0, 1.0)
PROB_EPS = 1e-7
THRESHOLD = 0.5          # ties count as positive


class ClsHead(ParamModule):
    """Single-hidden-layer MLP over the CLS vector, sigmoid outputs."""

    def __init__(self, rng: np.random.Generator, in_dim: int,
                 hidden: int | None = None):
        super().__init__()
        hidden = in_dim if hidden is None else hidden
        self.fc1 = self.add_child("fc1", Dense(rng, in_dim, hidden))
        self.fc2 = self.add_child("fc2", Dense(rng, hidden, NUM_CLASSES))

    def __call__(self, cls_vector: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.gelu(self.fc1(cls_vector))))


class EfficientHead(ParamModule):
    """Reshape feature-wise ViT output back to 8 x 8 x d, pool, dense, sigmoid."""

    def __init__(self, rng: np.random.Generator, token_dim: int,
                 spatial: int = 8):
        super().__init__()
        self.spatial = spatial
        self.fc = self.add_child("fc", Dense(rng, token_dim, NUM_CLASSES))

    def __call__(self, vit_out: Tensor) -> Tensor:
        # (B x) d x N feature-wise tokens -> (B x) N x d -> 8 x 8 x d
        tokens = ops.transpose2d(vit_out)
        n_tokens = tokens.shape[-2]
        if n_tokens != self.spatial * self.spatial:
            raise ValueError(
                f"{n_tokens} tokens cannot tile {self.spatial}x{self.spatial}")
        fmap = reassemble_patches(tokens, self.spatial, self.spatial, p=1)
        pooled = ops.pool_adaptive_avg(fmap, 1, 1)
        batched = pooled.data.ndim == 4
        d = pooled.shape[-1]
        flat = ops.reshape(pooled, (pooled.shape[0], d) if batched else (d,))
        return ops.sigmoid(self.fc(flat))


# ---------------------------------------------------------------------------
# loss

def weighted_multilabel_log_loss(labels: np.ndarray, probs: Tensor,
                                 alpha=DEFAULT_ALPHA) -> Tensor:
    """Class-weighted binary cross-entropy, normalized by the weight sum.

    `labels` is a (B x) 6 binary array; `probs` the matching sigmoid outputs.
    Batch inputs are averaged over samples.
    """
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (NUM_CLASSES,) or (alpha <= 0).any():
        raise ValueError("alpha must be 6 positive weights")
    y = np.asarray(labels, dtype=probs.data.dtype)
    p = ops.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    bce = ops.neg(ops.add(ops.mul(y, ops.log(p)),
                          ops.mul(1.0 - y, ops.log(ops.sub(1.0, p)))))
    weighted = ops.tsum(ops.mul(bce, alpha / alpha.sum()), axis=-1)
    return tmean_all(weighted)


def tmean_all(x: Tensor) -> Tensor:
    return ops.tmean(x) if x.data.size > 1 else ops.reshape(x, (1,))


# ---------------------------------------------------------------------------
# metrics (pure numpy, no gradients)

@dataclass
class MetricsRow:
    loss: float
    weighted_accuracy: float
    recall: float
    per_class_accuracy: np.ndarray      # 6 values, label order
    recall_degenerate: bool = False     # no positives in the batch

    def as_csv_values(self):
        return ([self.loss, self.weighted_accuracy, self.recall]
                + list(self.per_class_accuracy))


def predictions_from_probs(probs: np.ndarray) -> np.ndarray:
    return (np.asarray(probs) >= THRESHOLD).astype(np.uint8)


def weighted_accuracy(labels: np.ndarray, probs: np.ndarray,
                      alpha=DEFAULT_ALPHA, threshold: float = THRESHOLD) -> float:
    """Alpha-weighted mean of per-class accuracies at the threshold."""
    labels = np.atleast_2d(np.asarray(labels))
    probs = np.atleast_2d(np.asarray(probs))
    if labels.shape[0] == 0:
        raise ValueError("empty batch")
    alpha = np.asarray(alpha, dtype=float)
    pred = (probs >= threshold).astype(np.uint8)
    per_class = (pred == labels).mean(axis=0)
    return float((alpha * per_class).sum() / alpha.sum())


def recall_and_per_class_accuracy(labels: np.ndarray,
                                  probs: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Per-class accuracies plus micro recall pooled over all classes.

    Returns (accuracies, recall, degenerate) where degenerate flags a batch
    with zero positives (recall reported as 1.0).
    """
    labels = np.atleast_2d(np.asarray(labels))
    probs = np.atleast_2d(np.asarray(probs))
    pred = (probs >= THRESHOLD).astype(np.uint8)
    per_class = (pred == labels).mean(axis=0)
    positives = labels == 1
    n_pos = int(positives.sum())
    if n_pos == 0:
        return per_class, 1.0, True
    tp = int((pred[positives] == 1).sum())
    return per_class, tp / n_pos, False


def evaluate_metrics(labels: np.ndarray, probs: np.ndarray,
                     alpha=DEFAULT_ALPHA) -> MetricsRow:
    labels = np.atleast_2d(np.asarray(labels))
    probs = np.atleast_2d(np.asarray(probs))
    loss = weighted_multilabel_log_loss(labels, Tensor(probs), alpha).item()
    acc = weighted_accuracy(labels, probs, alpha)
    per_class, recall, degenerate = recall_and_per_class_accuracy(labels, probs)
    return MetricsRow(loss, acc, recall, per_class, degenerate)
