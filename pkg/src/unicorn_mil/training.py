"""Training recipe: AdamW with decoupled weight decay, batch size 1 with
gradient accumulation, domain dropout, cross-entropy, and checkpoint
selection by validation macro-F1.

Accumulated gradients are averaged over the accumulation window before
each optimizer step, so the effective learning rate does not depend on
``accum_steps``. Weight decay applies to weight matrices and learned
tokens only, never to biases or layer-norm parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericError, ShapeError
from .data import SampleRecord, SplitPlan
from .metrics import Metrics, compute_metrics
from .model import ModelConfig, UnicornModel, predict
from .rng import Rng


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 2.0e-5
    weight_decay: float = 2.0e-5
    accum_steps: int = 16
    batch_size: int = 1  # fixed; anything else is rejected
    domain_dropout_p: float = 0.7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.accum_steps < 1:
            raise ConfigError("accum_steps must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("batch_size is fixed at 1")
        if not 0.0 <= self.domain_dropout_p < 1.0:
            raise ConfigError("domain_dropout_p outside [0, 1)")


def sample_domain_mask(present, rng: Rng, p: float = 0.7) -> list[int]:
    """Keep one uniformly chosen present modality unconditionally; drop each
    other present modality independently with probability ``p``. The result
    is never empty."""
    mods = sorted(int(m) for m in present)
    if not mods:
        raise ShapeError("sample_domain_mask on empty modality set")
    keep = mods[rng.integers(len(mods))]
    out = [keep]
    for m in mods:
        if m != keep and rng.random() >= p:
            out.append(m)
    return sorted(out)


class AdamWState:
    """First/second moments per parameter plus the shared step counter."""

    def __init__(self, params: dict[str, "ad.Tensor"]):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def adamw_step(
    params: dict[str, "ad.Tensor"],
    state: AdamWState,
    cfg: TrainConfig,
    decay_names: set[str],
    grad_scale: float = 1.0,
) -> None:
    """One bias-corrected Adam update plus decoupled decay.

    Both the Adam term and the decay term are computed from the
    pre-update parameter value:

        p <- p - lr * mhat / (sqrt(vhat) + eps) - lr * wd * p
    """
    if not params:
        raise ConfigError("adamw_step on empty parameter set")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = p.grad * grad_scale
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        update = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if name in decay_names:
            update = update + cfg.lr * cfg.weight_decay * p.data
        p.data = p.data - update


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_macro_f1: float
    val_accuracy: float


@dataclass
class TrainResult:
    best_params: dict[str, np.ndarray]
    best_epoch: int
    best_val_f1: float
    history: list[EpochStats]
    model: object


def evaluate(model, samples: list[SampleRecord], n_classes: int) -> Metrics:
    """Inference with the full available modality mask per sample."""
    truths, preds = [], []
    for s in samples:
        cls, _ = predict(model, s, s.present_modalities)
        truths.append(s.label)
        preds.append(cls)
    return compute_metrics(truths, preds, n_classes)


def build_model(kind: str, cfg: ModelConfig, rng: Rng):
    if kind == "unicorn":
        return UnicornModel(cfg, rng)
    if kind == "attention_mil":
        from .baselines import AttentionMILModel

        return AttentionMILModel(cfg, rng)
    if kind == "single_stream_transformer":
        from .baselines import SingleStreamModel

        return SingleStreamModel(cfg, rng)
    raise ConfigError(f"unknown model kind {kind!r}")


def train(
    records: list[SampleRecord],
    split: SplitPlan,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    model_kind: str = "unicorn",
    log=None,
) -> TrainResult:
    """Train on the split's train part, select the best epoch by validation
    macro-F1 (ties go to the earlier epoch). Deterministic given
    (seed, data, config): two identical runs produce bit-identical results.
    """
    model_cfg.validate()
    train_cfg.validate()
    by_id = {r.sample_id: r for r in records}
    try:
        train_set = [by_id[sid] for sid in split.train]
        val_set = [by_id[sid] for sid in split.val]
    except KeyError as missing:
        raise ShapeError(f"split references unknown sample {missing}") from None
    if not train_set or not val_set:
        raise ConfigError("train and validation parts must be nonempty")

    root = Rng(train_cfg.seed)
    init_rng = root.derive(0)
    shuffle_rng = root.derive(1)
    mask_rng = root.derive(2)
    dropout_rng = root.derive(3)

    model = build_model(model_kind, model_cfg, init_rng)
    state = AdamWState(model.params)

    def snapshot():
        return {k: t.data.copy() for k, t in model.params.items()}

    best = snapshot()
    best_f1 = -1.0
    best_epoch = -1
    history: list[EpochStats] = []

    for tensor in model.params.values():
        tensor.zero_grad()

    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(train_set))
        losses = []
        pending = 0
        for idx in order:
            sample = train_set[idx]
            mask = sample_domain_mask(
                sample.present_modalities, mask_rng, train_cfg.domain_dropout_p
            )
            try:
                trace = model.forward(sample, mask, dropout_rng, training=True)
                loss = ad.cross_entropy(trace.logits, sample.label)
            except NumericError as exc:
                raise NumericError(
                    f"non-finite loss at sample {sample.sample_id}: {exc}"
                ) from None
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at sample {sample.sample_id}")
            losses.append(loss.item())
            ad.backward(loss)
            pending += 1
            if pending == train_cfg.accum_steps:
                adamw_step(model.params, state, train_cfg, model.decay_names, 1.0 / pending)
                for tensor in model.params.values():
                    tensor.zero_grad()
                pending = 0
        if pending:
            # trailing partial window: step on the mean of what accumulated
            adamw_step(model.params, state, train_cfg, model.decay_names, 1.0 / pending)
            for tensor in model.params.values():
                tensor.zero_grad()

        val = evaluate(model, val_set, model_cfg.n_classes)
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            val_macro_f1=val.macro_f1,
            val_accuracy=val.accuracy,
        )
        history.append(stats)
        if log:
            log(stats)
        if val.macro_f1 > best_f1:
            best_f1 = val.macro_f1
            best_epoch = epoch
            best = snapshot()

    for name, tensor in model.params.items():
        tensor.data = best[name].copy()
    return TrainResult(
        best_params=best,
        best_epoch=best_epoch,
        best_val_f1=best_f1,
        history=history,
        model=model,
    )


def write_history(history: list[EpochStats], path) -> None:
    from .ioutil import atomic_write_text

    lines = ["# epoch\ttrain_loss\tval_macro_f1\tval_accuracy"]
    lines += [
        f"{h.epoch}\t{h.train_loss:.10g}\t{h.val_macro_f1:.10g}\t{h.val_accuracy:.10g}"
        for h in history
    ]
    atomic_write_text(path, "\n".join(lines) + "\n")
