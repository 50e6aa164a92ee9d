"""Explainability maps: attention rollout, single-patch class scores,
class attention, and overlap averaging with final normalization.

Rollout follows the residual-mixing convention: per block, average the
heads, mix with the identity as 0.5 (A + I), renormalize rows, and
multiply the per-block matrices last-to-first. Patch weights compose the
two stages: the expert rollout row of the modality token restricted to
patch columns, scaled by the aggregator rollout's CLS-to-MT value.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .blocks import AttentionRecord, head_mean_attention
from .data import MODALITY_NAMES, FeatureBag, SampleRecord, read_bag
from .errors import DataError, FormatError, ShapeError
from .ioutil import atomic_write_bytes, atomic_write_text


def rollout_matrices(mats: list[np.ndarray]) -> np.ndarray:
    """Rollout over already head-averaged per-block attention matrices."""
    if not mats:
        raise ShapeError("rollout over zero blocks")
    t = mats[0].shape[0]
    out = np.eye(t)
    for a in mats:
        if a.shape != (t, t):
            raise ShapeError(f"attention matrix shape {a.shape} mismatches T={t}")
        mixed = 0.5 * (a + np.eye(t))
        mixed /= mixed.sum(axis=1, keepdims=True)
        out = mixed @ out
    return out


def rollout(records: list[AttentionRecord]) -> np.ndarray:
    return rollout_matrices([head_mean_attention(r) for r in records])


def patch_attention(trace, mask) -> dict[int, np.ndarray]:
    """Two-stage composed patch weights per present modality."""
    mods = sorted(int(m) for m in mask)
    agg = rollout(trace.aggregator_attention)
    out: dict[int, np.ndarray] = {}
    for rank, m in enumerate(mods):
        expert = rollout(trace.expert_attention[m])
        out[m] = float(agg[0, 1 + rank]) * expert[0, 1:]
    return out


def patch_class_scores(patch: np.ndarray, modality: int, model) -> np.ndarray:
    """Class probabilities when the model sees exactly one patch of one modality."""
    patch = np.asarray(patch, dtype=np.float64).reshape(1, -1)
    record = SampleRecord(
        sample_id="single-patch",
        individual_id="",
        segment_id="",
        label=0,
        bags={modality: FeatureBag(modality_id=modality, slide_id="single-patch", matrix=patch)},
    )
    with ad.no_grad():
        trace = model.forward(record, [modality], rng=None, training=False)
    return trace.probabilities


def class_attention(attention: np.ndarray, class_probs: np.ndarray, predicted_class: int) -> np.ndarray:
    """Per-patch attention times the probability of the predicted class."""
    attention = np.asarray(attention, dtype=np.float64)
    class_probs = np.asarray(class_probs, dtype=np.float64)
    if class_probs.shape[0] != attention.shape[0]:
        raise ShapeError("attention and class scores cover different patch sets")
    return attention * class_probs[:, predicted_class]


@dataclass
class PatchScoreMap:
    """Per-patch channels for one modality, with optional slide coordinates."""

    modality_id: int
    coords: np.ndarray  # (N, 2) integer slide coordinates
    rollout_attention: np.ndarray  # (N,)
    class_probs: np.ndarray  # (N, n_classes)
    class_attention: np.ndarray  # (N,)
    predicted_class: int


def compute_bag_map(model, bag: FeatureBag, coords: np.ndarray | None = None) -> PatchScoreMap:
    """Score one feature bag: rollout attention, per-patch class scores, and
    class attention against the bag-level predicted class."""
    n = bag.n_patches
    if coords is None:
        coords = np.stack([np.arange(n), np.zeros(n, dtype=np.int64)], axis=1)
    coords = np.asarray(coords)
    if coords.shape != (n, 2):
        raise ShapeError(f"coords shape {coords.shape} for {n} patches")
    record = SampleRecord(
        sample_id=bag.slide_id, individual_id="", segment_id="", label=0,
        bags={bag.modality_id: bag},
    )
    with ad.no_grad():
        trace = model.forward(record, [bag.modality_id], rng=None, training=False)
    predicted = int(np.argmax(trace.probabilities))
    attention = patch_attention(trace, [bag.modality_id])[bag.modality_id]
    probs = np.stack([patch_class_scores(bag.matrix[i], bag.modality_id, model) for i in range(n)])
    return PatchScoreMap(
        modality_id=bag.modality_id,
        coords=coords,
        rollout_attention=attention,
        class_probs=probs,
        class_attention=class_attention(attention, probs, predicted),
        predicted_class=predicted,
    )


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def aggregate_overlaps(maps: list[PatchScoreMap]) -> PatchScoreMap:
    """Average channels per slide coordinate over all bags covering it, then
    min-max normalize the scalar channels to [0, 1] (constant channel maps
    to all zeros). Class probabilities are averaged, not rescaled."""
    if not maps:
        raise DataError("aggregate_overlaps over zero maps")
    modality = maps[0].modality_id
    n_classes = maps[0].class_probs.shape[1]
    sums: dict[tuple[int, int], np.ndarray] = {}
    counts: dict[tuple[int, int], int] = {}
    for m in maps:
        if m.modality_id != modality:
            raise DataError("overlap set mixes modalities")
        for i in range(m.coords.shape[0]):
            key = (int(m.coords[i, 0]), int(m.coords[i, 1]))
            row = np.concatenate(
                [[m.rollout_attention[i]], m.class_probs[i], [m.class_attention[i]]]
            )
            if key in sums:
                sums[key] += row
                counts[key] += 1
            else:
                sums[key] = row.copy()
                counts[key] = 1
    keys = sorted(sums)
    if not keys:
        raise DataError("no covered coordinates")
    merged = np.stack([sums[k] / counts[k] for k in keys])
    predicted = int(np.bincount([m.predicted_class for m in maps]).argmax())
    return PatchScoreMap(
        modality_id=modality,
        coords=np.asarray(keys, dtype=np.int64),
        rollout_attention=_minmax(merged[:, 0]),
        class_probs=merged[:, 1 : 1 + n_classes],
        class_attention=_minmax(merged[:, 1 + n_classes]),
        predicted_class=predicted,
    )


# -- persistence -----------------------------------------------------------------


def write_score_map(score_map: PatchScoreMap, path, n_classes: int = 5) -> None:
    from .data import CLASS_NAMES

    prob_names = "\t".join(f"p_{CLASS_NAMES[c]}" for c in range(n_classes))
    lines = [f"# modality\tx\ty\tattention\t{prob_names}\tclass_attention"]
    name = MODALITY_NAMES[score_map.modality_id]
    for i in range(score_map.coords.shape[0]):
        probs = "\t".join(f"{v:.10g}" for v in score_map.class_probs[i])
        lines.append(
            f"{name}\t{score_map.coords[i, 0]}\t{score_map.coords[i, 1]}"
            f"\t{score_map.rollout_attention[i]:.10g}\t{probs}"
            f"\t{score_map.class_attention[i]:.10g}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_pgm(values: np.ndarray, coords: np.ndarray, path) -> None:
    """Rasterize one channel to a binary portable graymap for eyeballing."""
    xs = coords[:, 0] - coords[:, 0].min()
    ys = coords[:, 1] - coords[:, 1].min()
    width, height = int(xs.max()) + 1, int(ys.max()) + 1
    grid = np.zeros((height, width), dtype=np.uint8)
    lo, hi = values.min(), values.max()
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    grid[ys, xs] = np.round(255 * scaled).astype(np.uint8)
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + grid.tobytes())


def load_bag_set(directory) -> list[tuple[FeatureBag, np.ndarray]]:
    """Read every *.bag in a directory with its *.coords sidecar (x<TAB>y per
    patch). Bags without a sidecar get index coordinates."""
    directory = Path(directory)
    bag_files = sorted(directory.glob("*.bag"))
    if not bag_files:
        raise DataError(f"no .bag files in {directory}")
    out = []
    for bag_file in bag_files:
        bag = read_bag(bag_file)
        sidecar = bag_file.with_suffix(".coords")
        if sidecar.exists():
            rows = [
                line.split("\t")
                for line in sidecar.read_text().splitlines()
                if line.strip() and not line.startswith("#")
            ]
            coords = np.asarray([[int(a), int(b)] for a, b in rows], dtype=np.int64)
            if coords.shape[0] != bag.n_patches:
                raise FormatError(
                    f"{sidecar.name}: {coords.shape[0]} coordinates for {bag.n_patches} patches"
                )
        else:
            coords = np.stack(
                [np.arange(bag.n_patches), np.zeros(bag.n_patches, dtype=np.int64)], axis=1
            )
        out.append((bag, coords))
    return out
