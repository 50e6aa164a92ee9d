"""The two-stage architecture: per-modality experts, an aggregation expert,
and a linear classification head.

Each present modality's bag is projected into model space, a learned
modality token (MT) is prepended as token 0, and the modality's expert
blocks run over the result; the MT output row is the modality summary.
The aggregation expert sees [CLS, MT outputs in canonical modality order],
and the head reads the CLS output. Absent modalities contribute no tokens
at all, so masking a modality is bit-identical to deleting its bag.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    INIT_STD,
    AttentionRecord,
    block_forward,
    head_mean_attention,
    init_block_params,
)
from .data import SampleRecord
from .errors import ConfigError, ShapeError
from .rng import Rng


@dataclass
class ModelConfig:
    n_modalities: int = 4
    n_classes: int = 5
    feat_dim: int = 768
    model_dim: int = 256
    n_heads: int = 4
    blocks_per_expert: int = 2
    blocks_aggregator: int = 2
    dropout_p: float = 0.1

    def validate(self) -> None:
        counts = (
            self.n_modalities, self.n_classes, self.feat_dim, self.model_dim,
            self.n_heads, self.blocks_per_expert, self.blocks_aggregator,
        )
        if any(c < 1 for c in counts):
            raise ConfigError("model config: all counts must be >= 1")
        if self.model_dim % self.n_heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p {self.dropout_p} outside [0, 1)")


@dataclass
class ForwardTrace:
    """Everything a forward pass exposes for loss, metrics, and explainability."""

    expert_attention: dict[int, list[AttentionRecord]]
    aggregator_attention: list[AttentionRecord]
    penultimate: np.ndarray  # CLS vector feeding the head, shape (d,)
    logits: Tensor  # (1, n_classes), still on the graph
    probabilities: np.ndarray  # (n_classes,)


class UnicornModel:
    """Holds parameters and runs forward passes. Inference is read-only."""

    kind = "unicorn"

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d, din = cfg.model_dim, cfg.feat_dim

        def w(shape):
            return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.proj_w = [w((din, d)) for _ in range(cfg.n_modalities)]
        self.proj_b = [zeros((d,)) for _ in range(cfg.n_modalities)]
        self.mt = [w((1, d)) for _ in range(cfg.n_modalities)]
        self.expert_blocks = [
            [init_block_params(d, cfg.n_heads, rng) for _ in range(cfg.blocks_per_expert)]
            for _ in range(cfg.n_modalities)
        ]
        self.cls = w((1, d))
        self.agg_blocks = [
            init_block_params(d, cfg.n_heads, rng) for _ in range(cfg.blocks_aggregator)
        ]
        self.head_w = w((d, cfg.n_classes))
        self.head_b = zeros((cfg.n_classes,))

        self.params: dict[str, Tensor] = {}
        self.decay_names: set[str] = set()
        self._register()

    def _register(self) -> None:
        def put(name, tensor, decay):
            self.params[name] = tensor
            if decay:
                self.decay_names.add(name)

        for m in range(self.cfg.n_modalities):
            put(f"proj.{m}.w", self.proj_w[m], True)
            put(f"proj.{m}.b", self.proj_b[m], False)
            put(f"mt.{m}", self.mt[m], True)
            for l, bp in enumerate(self.expert_blocks[m]):
                decayed = bp.decayed()
                for fname, t in bp.named().items():
                    put(f"expert.{m}.{l}.{fname}", t, fname in decayed)
        put("cls", self.cls, True)
        for l, bp in enumerate(self.agg_blocks):
            decayed = bp.decayed()
            for fname, t in bp.named().items():
                put(f"agg.{l}.{fname}", t, fname in decayed)
        put("head.w", self.head_w, True)
        put("head.b", self.head_b, False)

    # -- forward ---------------------------------------------------------------

    def _check_mask(self, sample: SampleRecord, mask) -> list[int]:
        mods = sorted(int(m) for m in mask)
        if not mods:
            raise ShapeError("forward needs a nonempty modality mask")
        for m in mods:
            if m not in sample.bags:
                raise ShapeError(f"mask includes modality {m} absent from sample {sample.sample_id}")
        return mods

    def forward(self, sample: SampleRecord, mask, rng: Rng | None, training: bool) -> ForwardTrace:
        mods = self._check_mask(sample, mask)
        cfg = self.cfg
        expert_attention: dict[int, list[AttentionRecord]] = {}
        mt_outputs: list[Tensor] = []
        for m in mods:
            bag = sample.bags[m]
            if bag.n_patches < 1:
                raise ShapeError(f"empty bag for modality {m} in sample {sample.sample_id}")
            if bag.feat_dim != cfg.feat_dim:
                raise ShapeError(
                    f"bag width {bag.feat_dim} != configured feat_dim {cfg.feat_dim}"
                )
            x = ad.linear(Tensor(bag.matrix), self.proj_w[m], self.proj_b[m])
            tokens = ad.concat_rows([self.mt[m], x])
            records = []
            for bp in self.expert_blocks[m]:
                tokens, rec = block_forward(tokens, bp, rng, training, cfg.dropout_p)
                records.append(rec)
            expert_attention[m] = records
            mt_outputs.append(ad.take_rows(tokens, 0, 1))

        tokens = ad.concat_rows([self.cls] + mt_outputs)
        agg_records = []
        for bp in self.agg_blocks:
            tokens, rec = block_forward(tokens, bp, rng, training, cfg.dropout_p)
            agg_records.append(rec)
        cls_out = ad.take_rows(tokens, 0, 1)
        logits = ad.linear(cls_out, self.head_w, self.head_b)
        probs = ad.stable_softmax_np(logits.data.reshape(-1))
        return ForwardTrace(
            expert_attention=expert_attention,
            aggregator_attention=agg_records,
            penultimate=cls_out.data.reshape(-1).copy(),
            logits=logits,
            probabilities=probs,
        )


def predict(model, sample: SampleRecord, mask) -> tuple[int, np.ndarray]:
    """Most probable class (ties break toward the lower index) and probabilities."""
    with ad.no_grad():
        trace = model.forward(sample, mask, rng=None, training=False)
    return int(np.argmax(trace.probabilities)), trace.probabilities


def cls_to_mt_attention(trace: ForwardTrace, mask, n_modalities: int = 4) -> dict[int, float | None]:
    """Mean over aggregator layers and heads of the CLS row's attention to
    each modality token. Absent modalities map to None, not zero."""
    mods = sorted(int(m) for m in mask)
    per_layer = np.stack([head_mean_attention(rec) for rec in trace.aggregator_attention])
    cls_row = per_layer[:, 0, :].mean(axis=0)  # layer-mean CLS attention row
    out: dict[int, float | None] = {m: None for m in range(n_modalities)}
    for rank, m in enumerate(mods):
        out[m] = float(cls_row[1 + rank])
    return out
