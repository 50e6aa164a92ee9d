"""Matplotlib rendering for the report paths.

Every CLI command that emits a delimited report also renders the matching
figure next to it: training curves, the confusion matrix heatmap, the
single-stain and leave-one-out ablation bars, the per-class CLS-to-MT
attention heatmap, and grayscale score-map heatmaps. PNG output carries
no timestamps so renders stay byte-identical across runs.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import CLASS_NAMES, MODALITY_NAMES

matplotlib.rcParams.update({
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "savefig.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})

_PNG_META = {"Software": None}  # strip the matplotlib version string for determinism


def _save(fig, path):
    import io

    from .ioutil import atomic_write_bytes

    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def history_figure(history, path) -> None:
    fig, ax1 = plt.subplots()
    epochs = [h.epoch for h in history]
    ax1.plot(epochs, [h.train_loss for h in history], color="tab:red", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [h.val_macro_f1 for h in history], color="tab:blue", label="val macro-F1")
    ax2.plot(epochs, [h.val_accuracy for h in history], color="tab:cyan", label="val accuracy")
    ax2.set_ylabel("validation score", color="tab:blue")
    ax2.set_ylim(0, 1.02)
    ax2.grid(False)
    fig.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def confusion_figure(metrics, path) -> None:
    n = metrics.confusion.shape[0]
    names = CLASS_NAMES[:n]
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    im = ax.imshow(metrics.confusion_normalized, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{metrics.confusion_normalized[i, j]:.2f}\n({metrics.confusion[i, j]})",
                    ha="center", va="center", fontsize=7)
    ax.set_xticks(range(n), names)
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.grid(False)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)


def single_stain_figure(report, path) -> None:
    n_cls = len(report.full_metrics.per_class_f1)
    names = CLASS_NAMES[:n_cls]
    fig, ax = plt.subplots()
    width = 0.8 / len(MODALITY_NAMES)
    xs = np.arange(n_cls)
    for m, mod_name in enumerate(MODALITY_NAMES):
        metrics = report.single_stain.get(m)
        values = metrics.per_class_f1 if metrics else [0.0] * n_cls
        ax.bar(xs + (m - 1.5) * width, values, width=width, label=mod_name)
    ax.axhline(report.full_metrics.macro_f1, color="gray", linestyle=":",
               label="all stainings (macro)")
    ax.set_xticks(xs, names)
    ax.set_ylabel("F1 per class, single staining")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def leave_one_out_figure(report, path) -> None:
    fig, ax = plt.subplots()
    deltas = [
        report.leave_one_out[m].delta_f1 if report.leave_one_out[m].delta_f1 is not None else 0.0
        for m in range(len(MODALITY_NAMES))
    ]
    ax.bar(range(len(MODALITY_NAMES)), deltas, color="tab:orange")
    ax.axhline(0.0, color="gray", linestyle=":")
    ax.set_xticks(range(len(MODALITY_NAMES)), MODALITY_NAMES)
    ax.set_ylabel("macro-F1 change when excluded")
    fig.tight_layout()
    _save(fig, path)


def attention_figure(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    n_cls = report.attention_mean.shape[0]
    im = ax.imshow(np.nan_to_num(report.attention_mean), cmap="viridis")
    ax.set_xticks(range(len(MODALITY_NAMES)), MODALITY_NAMES)
    ax.set_yticks(range(n_cls), CLASS_NAMES[:n_cls])
    ax.set_xlabel("modality token")
    ax.set_ylabel("true class")
    ax.grid(False)
    fig.colorbar(im, ax=ax, fraction=0.046, label="mean CLS attention")
    fig.tight_layout()
    _save(fig, path)


def score_map_figure(score_map, channel: str, path) -> None:
    if channel == "attention":
        values = score_map.rollout_attention
    elif channel == "class_attention":
        values = score_map.class_attention
    else:
        values = score_map.class_probs[:, CLASS_NAMES.index(channel)]
    xs = score_map.coords[:, 0]
    ys = score_map.coords[:, 1]
    width = int(xs.max() - xs.min()) + 1
    height = int(ys.max() - ys.min()) + 1
    grid = np.full((height, width), np.nan)
    grid[ys - ys.min(), xs - xs.min()] = values
    fig, ax = plt.subplots(figsize=(5.0, max(1.5, 5.0 * height / max(width, 1))))
    im = ax.imshow(grid, cmap="coolwarm", interpolation="nearest")
    ax.set_title(f"{MODALITY_NAMES[score_map.modality_id]}: {channel}", fontsize=9)
    ax.grid(False)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    _save(fig, path)
