"""Cross-validation orchestration, inference-time ablations, the CLS-to-MT
attention aggregation, baseline comparisons, and feature export.

Every ablation condition reuses one fixed checkpoint per fold; only the
modality mask at inference changes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SampleRecord, SplitPlan, make_splits
from .errors import DataError
from .metrics import Metrics, compute_metrics
from .model import ModelConfig, cls_to_mt_attention, predict
from . import autodiff as ad
from .training import TrainConfig, TrainResult, train


@dataclass
class FoldResult:
    fold_id: int
    test_metrics: Metrics
    best_epoch: int
    best_val_f1: float
    params: dict[str, np.ndarray]
    truths: list[int]
    predictions: list[int]
    test_ids: list[str]


@dataclass
class CvResult:
    folds: list[FoldResult]
    mean_accuracy: float
    sd_accuracy: float
    mean_macro_f1: float
    sd_macro_f1: float


def run_cv(
    records: list[SampleRecord],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    splits: list[SplitPlan] | None = None,
    model_kind: str = "unicorn",
    log=None,
) -> CvResult:
    """Train and test every fold; summary is mean and sample standard
    deviation across folds."""
    if splits is None:
        splits = make_splits(records, train_cfg.seed)
    by_id = {r.sample_id: r for r in records}
    folds = []
    for plan in splits:
        try:
            result = train(records, plan, model_cfg, train_cfg, model_kind=model_kind, log=log)
        except Exception as exc:
            raise DataError(f"fold {plan.fold_id} failed: {exc}") from exc
        test_set = [by_id[sid] for sid in plan.test]
        truths, preds = [], []
        for s in test_set:
            cls, _ = predict(result.model, s, s.present_modalities)
            truths.append(s.label)
            preds.append(cls)
        folds.append(
            FoldResult(
                fold_id=plan.fold_id,
                test_metrics=compute_metrics(truths, preds, model_cfg.n_classes),
                best_epoch=result.best_epoch,
                best_val_f1=result.best_val_f1,
                params=result.best_params,
                truths=truths,
                predictions=preds,
                test_ids=list(plan.test),
            )
        )
    accs = np.array([f.test_metrics.accuracy for f in folds])
    f1s = np.array([f.test_metrics.macro_f1 for f in folds])
    sd = lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0
    return CvResult(
        folds=folds,
        mean_accuracy=float(accs.mean()),
        sd_accuracy=sd(accs),
        mean_macro_f1=float(f1s.mean()),
        sd_macro_f1=sd(f1s),
    )


@dataclass
class LeaveOneOutResult:
    metrics: Metrics | None
    delta_f1: float | None  # vs full input on the same evaluated samples
    n_evaluated: int


@dataclass
class AblationReport:
    full_metrics: Metrics
    single_stain: dict[int, Metrics | None]  # None = no data for that stain
    leave_one_out: dict[int, LeaveOneOutResult]
    attention_mean: np.ndarray  # (n_classes, n_modalities), NaN where unseen
    attention_counts: np.ndarray  # samples contributing per (class, modality)
    attention_argmax_counts: np.ndarray  # per-sample argmax tallies
    class_counts: np.ndarray


def ablate(model, test_records: list[SampleRecord]) -> AblationReport:
    """Single-stain and leave-one-stain-out inference plus per-class mean
    CLS-to-MT attention, all against one fixed checkpoint."""
    if not test_records:
        raise DataError("ablate on empty test set")
    cfg = model.cfg
    n_mod, n_cls = cfg.n_modalities, cfg.n_classes

    truths_full, preds_full = [], []
    att_sum = np.zeros((n_cls, n_mod))
    att_count = np.zeros((n_cls, n_mod), dtype=np.int64)
    att_argmax = np.zeros((n_cls, n_mod), dtype=np.int64)
    class_counts = np.zeros(n_cls, dtype=np.int64)
    for s in test_records:
        present = s.present_modalities
        with ad.no_grad():
            trace = model.forward(s, present, rng=None, training=False)
        truths_full.append(s.label)
        preds_full.append(int(np.argmax(trace.probabilities)))
        class_counts[s.label] += 1
        if model.kind == "unicorn":
            att = cls_to_mt_attention(trace, present, n_mod)
            values = {m: v for m, v in att.items() if v is not None}
            for m, v in values.items():
                att_sum[s.label, m] += v
                att_count[s.label, m] += 1
            best = max(sorted(values), key=lambda m: values[m])
            att_argmax[s.label, best] += 1
    full_metrics = compute_metrics(truths_full, preds_full, n_cls)

    single: dict[int, Metrics | None] = {}
    for m in range(n_mod):
        truths, preds = [], []
        for s in test_records:
            if m not in s.bags:
                continue
            cls, _ = predict(model, s, [m])
            truths.append(s.label)
            preds.append(cls)
        single[m] = compute_metrics(truths, preds, n_cls) if truths else None

    loo: dict[int, LeaveOneOutResult] = {}
    for m in range(n_mod):
        truths, preds, base_preds = [], [], []
        for s, full_pred in zip(test_records, preds_full):
            mask = [x for x in s.present_modalities if x != m]
            if not mask:
                continue  # the sample only has modality m; nothing to run
            cls, _ = predict(model, s, mask)
            truths.append(s.label)
            preds.append(cls)
            base_preds.append(full_pred)
        if truths:
            metrics = compute_metrics(truths, preds, n_cls)
            base = compute_metrics(truths, base_preds, n_cls)
            loo[m] = LeaveOneOutResult(metrics, metrics.macro_f1 - base.macro_f1, len(truths))
        else:
            loo[m] = LeaveOneOutResult(None, None, 0)

    att_mean = np.where(att_count > 0, att_sum / np.maximum(att_count, 1), np.nan)
    return AblationReport(
        full_metrics=full_metrics,
        single_stain=single,
        leave_one_out=loo,
        attention_mean=att_mean,
        attention_counts=att_count,
        attention_argmax_counts=att_argmax,
        class_counts=class_counts,
    )


def train_baseline(
    kind: str,
    records: list[SampleRecord],
    split: SplitPlan,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
) -> TrainResult:
    """Same data pipeline, optimizer, and domain dropout; only the model differs."""
    return train(records, split, model_cfg, train_cfg, model_kind=kind)


@dataclass
class FeatureRow:
    sample_id: str
    label: int
    descriptor: str  # "full" or a modality name
    vector: np.ndarray


def export_features(model, records: list[SampleRecord], single_modality: bool = True) -> list[FeatureRow]:
    """Penultimate vectors per sample: one full-mask row plus, optionally,
    one row per present modality (its name recorded as the descriptor)."""
    from .data import MODALITY_NAMES

    rows = []
    for s in records:
        with ad.no_grad():
            trace = model.forward(s, s.present_modalities, rng=None, training=False)
        rows.append(FeatureRow(s.sample_id, s.label, "full", trace.penultimate))
        if not single_modality:
            continue
        for m in s.present_modalities:
            with ad.no_grad():
                trace = model.forward(s, [m], rng=None, training=False)
            rows.append(FeatureRow(s.sample_id, s.label, MODALITY_NAMES[m], trace.penultimate))
    return rows


def write_features(rows: list[FeatureRow], path) -> None:
    from .data import CLASS_NAMES
    from .ioutil import atomic_write_text

    lines = ["# sample_id\tlabel\tmask\tfeatures..."]
    for r in rows:
        vec = "\t".join(f"{v:.10g}" for v in r.vector)
        lines.append(f"{r.sample_id}\t{CLASS_NAMES[r.label]}\t{r.descriptor}\t{vec}")
    atomic_write_text(path, "\n".join(lines) + "\n")
