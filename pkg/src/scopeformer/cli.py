"""Command-line entry points.

Subcommands: synth, train, eval, params, diag {cosine, attention, features}.
Reports write the raw artifact (CSV / PGM / binary formats) plus a rendered
PNG figure alongside.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, PRESETS, load_config, preset
from .diagnostics import (encoder_cosine_similarity, export_attention_maps,
                          export_feature_maps)
from .ingest import dataset_read, dataset_write, synth_generate
from .model import assemble_pipeline
from .train import count_parameters, evaluate, load_model, train


def _config_from_args(args) -> "ScopeformerConfig":
    if args.config in PRESETS:
        return preset(args.config)
    return load_config(args.config)


def cmd_synth(args) -> int:
    samples = synth_generate(args.seed, args.n, args.size)
    dataset_write(samples, args.out)
    labels = np.stack([s.label for s in samples])
    print(f"wrote {args.n} samples ({args.size}x{args.size}) to {args.out}")
    print("prevalence:", " ".join(f"{v:.3f}" for v in labels.mean(axis=0)))
    return 0


def cmd_train(args) -> int:
    from .report import render_training_curves

    config = _config_from_args(args)
    val = dataset_read(args.val_data) if args.val_data else None
    manifest = train(config, args.data, args.out, seed=args.seed,
                     val_samples=val)
    render_training_curves(manifest.metrics_path,
                           os.path.join(args.out, "training_curves.png"))
    print(f"run complete: best loss {manifest.best_loss:.4f} "
          f"after {manifest.epochs_run} epochs")
    print(f"checkpoint: {manifest.checkpoint_path}")
    print(f"metrics:    {manifest.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    row = evaluate(args.ckpt, args.data)
    names = ["loss", "weighted_accuracy", "recall", "acc_any", "acc_edh",
             "acc_iph", "acc_ivh", "acc_sah", "acc_sdh"]
    print(",".join(names))
    print(",".join(f"{v:.6f}" for v in row.as_csv_values()))
    return 0


def cmd_params(args) -> int:
    config = _config_from_args(args)
    model = assemble_pipeline(config)
    print(json.dumps(count_parameters(model), indent=2))
    return 0


def cmd_diag_cosine(args) -> int:
    from .report import render_similarity_curve

    model = load_model(args.ckpt)
    samples = dataset_read(args.data)[:args.batch]
    curve = encoder_cosine_similarity(model, samples)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "cosine_similarity.csv")
    curve.write_csv(csv_path)
    fig_path = render_similarity_curve(
        curve, os.path.join(args.out, "cosine_similarity.png"))
    print(f"wrote {csv_path} and {fig_path} "
          f"(batch={curve.batch_size}, cls_excluded={curve.cls_excluded})")
    return 0


def cmd_diag_attention(args) -> int:
    from .report import render_pgm_grid

    model = load_model(args.ckpt)
    samples = dataset_read(args.data)
    layers = [int(v) for v in args.layers.split(",")]
    paths = export_attention_maps(model, samples[args.index], layers, args.out)
    fig_path = render_pgm_grid(paths, os.path.join(args.out, "attention.png"),
                               title="attention score maps")
    print(f"wrote {len(paths)} maps to {args.out}; figure {fig_path}")
    return 0


def cmd_diag_features(args) -> int:
    from .report import render_pgm_grid

    model = load_model(args.ckpt)
    samples = dataset_read(args.data)
    paths = export_feature_maps(model, samples[args.index], args.out)
    fig_path = render_pgm_grid(paths, os.path.join(args.out, "features.png"),
                               title="projected backbone features", cols=2)
    print(f"wrote {len(paths)} grids to {args.out}; figure {fig_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scopeformer",
        description="Hybrid multi-CNN/transformer hemorrhage classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True,
                   help="preset name or config file path")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val-data", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("params", help="parameter accounting for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    diag = sub.add_parser("diag", help="diagnostics on a trained model")
    dsub = diag.add_subparsers(dest="diag_command", required=True)

    p = dsub.add_parser("cosine", help="inter-encoder cosine similarity")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch", type=int, default=32)
    p.set_defaults(func=cmd_diag_cosine)

    p = dsub.add_parser("attention", help="attention score map export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layers", required=True,
                   help="comma-separated layer indices")
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_diag_attention)

    p = dsub.add_parser("features", help="backbone feature map export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_diag_features)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
