"""Operator surface: generate, split, train, evaluate, ablate, explain, export.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
5 version mismatch. Failures print one machine-parsable line to stderr:
``error: <class>: <detail>``. All outputs are written atomically, and the
report commands render a matplotlib figure next to each delimited file.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import (
    apply_overrides,
    build_run_config,
    build_synthetic_spec,
    model_config_from_metadata,
    model_config_metadata,
    parse_kv_file,
    run_metadata_text,
    synthetic_spec_text,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    CLASS_NAMES,
    MODALITY_NAMES,
    generate_synthetic,
    load_manifest,
    load_samples,
    make_splits,
    read_splits,
    write_splits,
)
from .errors import ConfigError, ConfigMismatchError, DataError, UnicornError
from .explain import (
    aggregate_overlaps,
    compute_bag_map,
    load_bag_set,
    write_pgm,
    write_score_map,
)
from .harness import ablate, export_features, write_features
from .ioutil import atomic_write_text
from .metrics import compute_metrics
from .model import predict
from .rng import Rng
from .training import build_model, train, write_history


def _restore_model(checkpoint_path):
    meta, tensors = load_checkpoint(checkpoint_path)
    kind, cfg = model_config_from_metadata(meta)
    model = build_model(kind, cfg, Rng(0))
    names = set(model.params)
    if names != set(tensors):
        raise ConfigMismatchError(
            f"checkpoint tensors do not match a {kind} model of this config"
        )
    for name, tensor in model.params.items():
        if tensor.data.shape != tensors[name].shape:
            raise ConfigMismatchError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape}, model {tensor.data.shape}"
            )
        tensor.data = tensors[name]
    return model, meta


def _load_fold_samples(manifest, splits_path, fold, cfg=None):
    stubs = load_manifest(manifest)
    plans = read_splits(splits_path)
    matching = [p for p in plans if p.fold_id == fold]
    if not matching:
        raise DataError(f"fold {fold} not present in {splits_path}")
    records = load_samples(stubs)
    if cfg is not None:
        widths = {b.feat_dim for r in records for b in r.bags.values()}
        if widths != {cfg.feat_dim}:
            raise ConfigMismatchError(
                f"data feature width {sorted(widths)} does not match configured "
                f"feat_dim {cfg.feat_dim}"
            )
    return records, matching[0]


def _write_metrics_report(metrics, out_dir, stem="metrics"):
    out_dir = Path(out_dir)
    n = metrics.confusion.shape[0]
    names = CLASS_NAMES[:n]
    lines = [
        f"samples\t{metrics.n_samples}",
        f"accuracy\t{metrics.accuracy:.6f}",
        f"macro_f1\t{metrics.macro_f1:.6f}",
    ]
    for c, name in enumerate(names):
        flag = "\tabsent" if c in metrics.absent_classes else ""
        lines.append(f"f1_{name}\t{metrics.per_class_f1[c]:.6f}{flag}")
    atomic_write_text(out_dir / f"{stem}.tsv", "\n".join(lines) + "\n")

    rows = ["true\\pred\t" + "\t".join(names)]
    for c in range(n):
        rows.append(names[c] + "\t" + "\t".join(str(v) for v in metrics.confusion[c]))
    rows.append("")
    rows.append("row-normalized")
    for c in range(n):
        rows.append(
            names[c] + "\t" + "\t".join(f"{v:.6f}" for v in metrics.confusion_normalized[c])
        )
    atomic_write_text(out_dir / "confusion.tsv", "\n".join(rows) + "\n")
    figures.confusion_figure(metrics, out_dir / "confusion.png")


# -- subcommands -------------------------------------------------------------


def cmd_synth(args) -> int:
    values = apply_overrides(parse_kv_file(args.spec), args.set)
    spec = build_synthetic_spec(values)
    out_dir = Path(args.out)
    generate_synthetic(spec, out_dir)
    atomic_write_text(out_dir / "spec_used.cfg", synthetic_spec_text(spec))
    print(f"wrote {out_dir / 'manifest.tsv'}")
    return 0


def cmd_split(args) -> int:
    stubs = load_manifest(args.manifest)
    plans = make_splits(stubs, args.seed)
    write_splits(plans, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    values = parse_kv_file(args.config) if args.config else {}
    values = apply_overrides(values, args.set)
    model_cfg, train_cfg = build_run_config(values)
    records, plan = _load_fold_samples(args.data, args.splits, args.fold, model_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = train(records, plan, model_cfg, train_cfg, model_kind=args.model)
    meta = model_config_metadata(model_cfg, args.model)
    save_checkpoint(out_dir / "checkpoint.ckpt", meta, result.best_params)
    write_history(result.history, out_dir / "history.tsv")
    if result.history:
        figures.history_figure(result.history, out_dir / "history.png")
    extra = {
        "fold": str(args.fold),
        "model_kind": args.model,
        "best_epoch": str(result.best_epoch),
        "best_val_macro_f1": f"{result.best_val_f1:.6f}",
    }
    atomic_write_text(out_dir / "run_meta.txt", run_metadata_text(model_cfg, train_cfg, extra))
    print(f"wrote {out_dir / 'checkpoint.ckpt'} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    records, plan = _load_fold_samples(args.data, args.splits, args.fold, model.cfg)
    by_id = {r.sample_id: r for r in records}
    part = getattr(plan, args.part)
    if not part:
        raise DataError(f"fold {args.fold} has an empty {args.part} part")
    samples = [by_id[sid] for sid in part]
    truths, preds = [], []
    for s in samples:
        cls, _ = predict(model, s, s.present_modalities)
        truths.append(s.label)
        preds.append(cls)
    metrics = compute_metrics(truths, preds, model.cfg.n_classes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_metrics_report(metrics, out_dir)
    print(f"accuracy {metrics.accuracy:.4f}  macro_f1 {metrics.macro_f1:.4f}")
    return 0


def cmd_ablate(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    records, plan = _load_fold_samples(args.data, args.splits, args.fold, model.cfg)
    by_id = {r.sample_id: r for r in records}
    samples = [by_id[sid] for sid in plan.test]
    report = ablate(model, samples)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    n = model.cfg.n_classes
    lines = ["# modality\tn\taccuracy\tmacro_f1\t" + "\t".join(f"f1_{c}" for c in CLASS_NAMES[:n])]
    for m, name in enumerate(MODALITY_NAMES):
        metrics = report.single_stain.get(m)
        if metrics is None:
            lines.append(f"{name}\t0\tno_data\tno_data" + "\tno_data" * n)
        else:
            f1s = "\t".join(f"{v:.6f}" for v in metrics.per_class_f1)
            lines.append(f"{name}\t{metrics.n_samples}\t{metrics.accuracy:.6f}\t{metrics.macro_f1:.6f}\t{f1s}")
    full = report.full_metrics
    f1s = "\t".join(f"{v:.6f}" for v in full.per_class_f1)
    lines.append(f"all\t{full.n_samples}\t{full.accuracy:.6f}\t{full.macro_f1:.6f}\t{f1s}")
    atomic_write_text(out_dir / "single_stain.tsv", "\n".join(lines) + "\n")

    lines = ["# excluded\tn\tmacro_f1\tdelta_f1_vs_full"]
    for m, name in enumerate(MODALITY_NAMES):
        r = report.leave_one_out[m]
        if r.metrics is None:
            lines.append(f"{name}\t0\tno_data\tno_data")
        else:
            lines.append(f"{name}\t{r.n_evaluated}\t{r.metrics.macro_f1:.6f}\t{r.delta_f1:.6f}")
    atomic_write_text(out_dir / "leave_one_out.tsv", "\n".join(lines) + "\n")

    lines = ["# true_class\tmodality\tmean_cls_attention\tn\targmax_count"]
    for c in range(n):
        for m, name in enumerate(MODALITY_NAMES):
            value = report.attention_mean[c, m]
            cell = "no_data" if np.isnan(value) else f"{value:.6f}"
            lines.append(
                f"{CLASS_NAMES[c]}\t{name}\t{cell}\t{report.attention_counts[c, m]}"
                f"\t{report.attention_argmax_counts[c, m]}"
            )
    atomic_write_text(out_dir / "cls_mt_attention.tsv", "\n".join(lines) + "\n")

    _write_metrics_report(report.full_metrics, out_dir, stem="full_metrics")
    figures.single_stain_figure(report, out_dir / "single_stain.png")
    figures.leave_one_out_figure(report, out_dir / "leave_one_out.png")
    figures.attention_figure(report, out_dir / "cls_mt_attention.png")
    print(f"wrote ablation report to {out_dir}")
    return 0


def cmd_explain(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = model.cfg.n_classes

    if args.bag_set:
        bag_maps = [compute_bag_map(model, bag, coords) for bag, coords in load_bag_set(args.bag_set)]
        maps = {bag_maps[0].modality_id: aggregate_overlaps(bag_maps)}
    elif args.sample_id:
        if not args.data:
            raise ConfigError("--sample-id requires --data")
        stubs = [s for s in load_manifest(args.data) if s.sample_id == args.sample_id]
        if not stubs:
            raise DataError(f"sample {args.sample_id!r} not in manifest")
        record = load_samples(stubs, model.cfg.feat_dim)[0]
        maps = {
            m: aggregate_overlaps([compute_bag_map(model, record.bags[m])])
            for m in record.present_modalities
        }
    else:
        raise ConfigError("explain needs --sample-id or --bag-set")

    for m, score_map in sorted(maps.items()):
        name = MODALITY_NAMES[m]
        write_score_map(score_map, out_dir / f"map_{name}.tsv", n)
        write_pgm(score_map.rollout_attention, score_map.coords, out_dir / f"map_{name}_attention.pgm")
        write_pgm(score_map.class_attention, score_map.coords, out_dir / f"map_{name}_class_attention.pgm")
        for c in range(n):
            write_pgm(score_map.class_probs[:, c], score_map.coords,
                      out_dir / f"map_{name}_p_{CLASS_NAMES[c]}.pgm")
        figures.score_map_figure(score_map, "attention", out_dir / f"map_{name}_attention.png")
        figures.score_map_figure(score_map, "class_attention", out_dir / f"map_{name}_class_attention.png")
    print(f"wrote score maps for {len(maps)} modalities to {out_dir}")
    return 0


def cmd_export(args) -> int:
    model, _ = _restore_model(args.checkpoint)
    stubs = load_manifest(args.data)
    records = load_samples(stubs, model.cfg.feat_dim)
    rows = export_features(model, records, single_modality=not args.full_only)
    write_features(rows, args.out)
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unicorn-mil",
        description="Two-stage multi-modal transformer over per-modality feature bags.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multi-stain dataset")
    p.add_argument("spec", help="key=value synthetic spec file")
    p.add_argument("out", help="output directory (bags plus manifest.tsv)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a spec key")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write grouped 5-fold cross-validation splits")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int, required=True, help="shuffle seed")
    p.add_argument("--out", required=True, help="output splits file")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold and write the best checkpoint")
    p.add_argument("--config", help="key=value run config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--splits", required=True, help="splits file from `split`")
    p.add_argument("--fold", type=int, required=True, help="fold id to train")
    p.add_argument("--model", default="unicorn",
                   choices=["unicorn", "attention_mil", "single_stream_transformer"],
                   help="model kind (baselines train through the same pipeline)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split part")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--splits", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--part", default="test", choices=["train", "val", "test"],
                   help="which split part to evaluate")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="single-stain / leave-one-out ablations and attention report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--splits", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("explain", help="score maps: rollout attention, class scores, class attention")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample-id", help="explain one manifest sample (requires --data)")
    p.add_argument("--data", help="dataset manifest for --sample-id")
    p.add_argument("--bag-set", help="directory of overlapping .bag files with .coords sidecars")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("export", help="export penultimate feature vectors for embedding tools")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--full-only", action="store_true",
                   help="skip the per-single-modality variant rows")
    p.add_argument("--out", required=True, help="output file")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UnicornError as exc:
        print(f"error: {exc.error_class}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
