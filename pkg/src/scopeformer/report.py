"""Matplotlib figure rendering for the report path of the CLI.

Every diagnostic command writes its raw artifact (CSV / PGM) plus a rendered
PNG figure next to it; training runs get a loss/accuracy curve figure.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import SimilarityCurve, read_pgm


def render_similarity_curve(curve: SimilarityCurve, path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = np.arange(1, len(curve.values) + 1)
    ax.plot(xs, curve.values, marker="o")
    ax.set_xlabel("encoder layer")
    ax.set_ylabel("cosine similarity to last layer")
    ax.set_ylim(-1.05, 1.05)
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def render_pgm_grid(pgm_paths: list[str], path, title: str = "",
                    cols: int = 4) -> str:
    if not pgm_paths:
        raise ValueError("nothing to render")
    rows = int(np.ceil(len(pgm_paths) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).reshape(-1)
    for ax in axes:
        ax.axis("off")
    for ax, p in zip(axes, pgm_paths):
        ax.imshow(read_pgm(p), cmap="gray", vmin=0, vmax=255)
        ax.set_title(os.path.splitext(os.path.basename(p))[0], fontsize=6)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def render_training_curves(metrics_csv, path) -> str:
    rows = []
    with open(metrics_csv, newline="") as f:
        for row in csv.DictReader(f):
            rows.append(row)
    if not rows:
        raise ValueError(f"no metric rows in {metrics_csv}")
    splits = sorted({r["split"] for r in rows})
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split in splits:
        sub = [r for r in rows if r["split"] == split]
        epochs = [int(r["epoch"]) for r in sub]
        ax1.plot(epochs, [float(r["loss"]) for r in sub], marker=".",
                 label=split)
        ax2.plot(epochs, [float(r["weighted_accuracy"]) for r in sub],
                 marker=".", label=split)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("weighted accuracy")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)
