"""Training loop, evaluation and run orchestration.

A run consumes a config plus a dataset file and leaves behind: the config
snapshot, per-epoch metric CSV rows, the best-loss checkpoint and a manifest.
The optional two-stage mode first fits the backbones under a temporary linear
head, then freezes them entirely and trains the transformer on top.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ScopeformerConfig, load_config, write_config
from .heads import (DEFAULT_ALPHA, MetricsRow, evaluate_metrics,
                    weighted_multilabel_log_loss)
from .ingest import Sample, dataset_read
from .model import ScopeformerModel, assemble_pipeline
from .nn import Dense, ParamModule
from .optim import Adam
from .tensor import Tape, Tensor, backward, no_grad

METRIC_FIELDS = ("epoch", "split", "loss", "weighted_accuracy", "recall",
                 "acc_any", "acc_edh", "acc_iph", "acc_ivh", "acc_sah",
                 "acc_sdh")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunManifest:
    config_path: str
    seed: int
    checkpoint_path: str
    metrics_path: str
    started_at: float
    finished_at: float = 0.0
    best_loss: float = float("inf")
    epochs_run: int = 0

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.__dict__, f, indent=2)


def _stack_images(samples: list[Sample], idx) -> np.ndarray:
    return np.stack([samples[i].image for i in idx])


def _stack_labels(samples: list[Sample], idx) -> np.ndarray:
    return np.stack([samples[i].label for i in idx])


def predict_probs(model: ScopeformerModel, samples: list[Sample],
                  batch_size: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = range(start, min(start + batch_size, len(samples)))
            probs, _ = model(_stack_images(samples, idx))
            out.append(probs.data)
    return np.concatenate(out, axis=0)


def evaluate_on(model: ScopeformerModel, samples: list[Sample],
                alpha=DEFAULT_ALPHA) -> MetricsRow:
    probs = predict_probs(model, samples)
    labels = np.stack([s.label for s in samples])
    return evaluate_metrics(labels, probs, alpha)


def _write_metric_row(writer, epoch: int, split: str, row: MetricsRow) -> None:
    writer.writerow([epoch, split] + [f"{v:.6f}" for v in row.as_csv_values()])


class _PretrainHead(ParamModule):
    """Temporary pooled linear head used to fit backbones before freezing."""

    def __init__(self, model: ScopeformerModel):
        super().__init__()
        self.model = model
        for i, cnn in enumerate(model.backbones):
            self.add_child(f"backbone{i}", cnn)
        for i, proj in enumerate(model.projections):
            self.add_child(f"projection{i}", proj)
        rng = np.random.default_rng(model.config.seed + 17)
        self.fc = self.add_child("fc", Dense(rng, model.config.d, 6))

    def __call__(self, images: Tensor) -> Tensor:
        gfm = self.model.global_feature_map(images)
        pooled = ops.pool_adaptive_avg(gfm.tensor, 1, 1)
        flat = ops.reshape(pooled, (pooled.shape[0], self.model.config.d))
        return ops.sigmoid(self.fc(flat))


def _fit(module, forward, samples: list[Sample], epochs: int,
         cfg: ScopeformerConfig, rng: np.random.Generator,
         on_epoch=None) -> list[float]:
    opt = Adam(module, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = _stack_images(samples, idx)
            if cfg.flip_augment:
                flip = rng.random(len(idx)) < 0.5
                images = images.copy()
                images[flip] = images[flip, :, ::-1]
            labels = _stack_labels(samples, idx)
            module.zero_grad()
            with Tape() as tape:
                probs = forward(Tensor(images))
                loss = weighted_multilabel_log_loss(labels, probs)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}")
                backward(loss, tape)
            opt.step()
            batch_losses.append(loss.item())
        epoch_losses.append(float(np.mean(batch_losses)))
        if on_epoch is not None and on_epoch(epoch, epoch_losses[-1]):
            break
    return epoch_losses


def train(config: ScopeformerConfig, dataset_path, out_dir,
          seed: int | None = None, val_samples: list[Sample] | None = None,
          stop_at_weighted_accuracy: float | None = None) -> RunManifest:
    """Fit a model on the dataset; artifacts land in `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    if seed is not None:
        config = dataclasses.replace(config, seed=seed)
    config = config.validate()
    samples = dataset_read(dataset_path)
    rng = np.random.default_rng(config.seed)
    model = assemble_pipeline(config)

    config_path = os.path.join(out_dir, "config.cfg")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    ckpt_path = os.path.join(out_dir, "best.ckpt")
    write_config(config, config_path)
    manifest = RunManifest(config_path, config.seed, ckpt_path, metrics_path,
                           started_at=time.time())

    if config.pretrain_backbone and config.vit_kind != "raw-vit":
        pre = _PretrainHead(model)
        _fit(pre, pre, samples, config.pretrain_epochs, config, rng)
        model.apply_freeze(1.0)

    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_FIELDS)

        def on_epoch(epoch: int, _train_batch_loss: float) -> bool:
            train_row = evaluate_on(model, samples)
            _write_metric_row(writer, epoch, "train", train_row)
            monitored = train_row
            if val_samples is not None:
                val_row = evaluate_on(model, val_samples)
                _write_metric_row(writer, epoch, "val", val_row)
                monitored = val_row
            if monitored.loss < manifest.best_loss:
                manifest.best_loss = monitored.loss
                save_checkpoint(model, ckpt_path)
            manifest.epochs_run = epoch + 1
            return (stop_at_weighted_accuracy is not None
                    and monitored.weighted_accuracy
                    >= stop_at_weighted_accuracy)

        _fit(model, lambda x: model(x)[0], samples, config.epochs, config,
             rng, on_epoch=on_epoch)

    manifest.finished_at = time.time()
    manifest.save(os.path.join(out_dir, "manifest.json"))
    return manifest


def evaluate(checkpoint_path, dataset_path,
             config: ScopeformerConfig | None = None) -> MetricsRow:
    """Load a checkpoint (config from its sibling snapshot) and score a set."""
    if config is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)),
                               "config.cfg")
        config = load_config(sibling)
    model = assemble_pipeline(config)
    load_checkpoint(model, checkpoint_path)
    return evaluate_on(model, dataset_read(dataset_path))


def load_model(checkpoint_path, config: ScopeformerConfig | None = None
               ) -> ScopeformerModel:
    if config is None:
        sibling = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)),
                               "config.cfg")
        config = load_config(sibling)
    model = assemble_pipeline(config)
    load_checkpoint(model, checkpoint_path)
    return model


def count_parameters(model: ScopeformerModel) -> dict:
    """Total plus per-component trainable/frozen parameter counts."""
    per_module: dict[str, dict[str, int]] = {}
    total = {"trainable": 0, "frozen": 0}
    for name, t in model.named_parameters():
        component = name.split(".", 1)[0]
        bucket = per_module.setdefault(component,
                                       {"trainable": 0, "frozen": 0})
        key = "trainable" if t.requires_grad else "frozen"
        bucket[key] += t.size
        total[key] += t.size
    return {"total": total, "modules": per_module}
