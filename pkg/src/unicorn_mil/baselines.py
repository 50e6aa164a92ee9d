"""Comparison models trained through the identical pipeline.

AttentionMIL pools every patch of every present bag with gated attention
(weights softmax(w' (tanh(V h) * sigmoid(U h)))) and classifies the
weighted mean with a linear head. The single-stream transformer runs one
shared two-block transformer over the concatenation of all present
modalities' projected patches with a single CLS token, deliberately
ignoring which staining a patch came from.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import INIT_STD, AttentionRecord, block_forward, init_block_params
from .data import SampleRecord
from .errors import ShapeError
from .model import ModelConfig
from .rng import Rng


@dataclass
class BaselineTrace:
    penultimate: np.ndarray
    logits: Tensor
    probabilities: np.ndarray
    pooling_weights: np.ndarray | None = None
    attention: list[AttentionRecord] | None = None


def _gather_patches(model, sample: SampleRecord, mask) -> list[int]:
    mods = sorted(int(m) for m in mask)
    if not mods:
        raise ShapeError("forward needs a nonempty modality mask")
    for m in mods:
        if m not in sample.bags:
            raise ShapeError(f"mask includes modality {m} absent from sample {sample.sample_id}")
        if sample.bags[m].feat_dim != model.cfg.feat_dim:
            raise ShapeError(
                f"bag width {sample.bags[m].feat_dim} != configured feat_dim {model.cfg.feat_dim}"
            )
    return mods


class AttentionMILModel:
    kind = "attention_mil"

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d, din = cfg.model_dim, cfg.feat_dim

        def w(shape):
            return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=True)

        self.proj_w = w((din, d))
        self.proj_b = Tensor(np.zeros(d), requires_grad=True)
        self.gate_v = w((d, d))
        self.gate_u = w((d, d))
        self.gate_w = w((d, 1))
        self.head_w = w((d, cfg.n_classes))
        self.head_b = Tensor(np.zeros(cfg.n_classes), requires_grad=True)
        self.params = {
            "proj.w": self.proj_w, "proj.b": self.proj_b,
            "gate.v": self.gate_v, "gate.u": self.gate_u, "gate.w": self.gate_w,
            "head.w": self.head_w, "head.b": self.head_b,
        }
        self.decay_names = {"proj.w", "gate.v", "gate.u", "gate.w", "head.w"}

    def forward(self, sample: SampleRecord, mask, rng, training: bool) -> BaselineTrace:
        mods = _gather_patches(self, sample, mask)
        stacked = np.concatenate([sample.bags[m].matrix for m in mods], axis=0)
        h = ad.linear(Tensor(stacked), self.proj_w, self.proj_b)
        gates = ad.mul(ad.tanh(h @ self.gate_v), ad.sigmoid(h @ self.gate_u))
        scores = ad.transpose_last2(gates @ self.gate_w)  # (1, N)
        weights = ad.softmax(scores, axis=-1)
        pooled = weights @ h  # (1, d)
        logits = ad.linear(pooled, self.head_w, self.head_b)
        return BaselineTrace(
            penultimate=pooled.data.reshape(-1).copy(),
            logits=logits,
            probabilities=ad.stable_softmax_np(logits.data.reshape(-1)),
            pooling_weights=weights.data.reshape(-1).copy(),
        )


class SingleStreamModel:
    kind = "single_stream_transformer"

    def __init__(self, cfg: ModelConfig, rng: Rng):
        cfg.validate()
        self.cfg = cfg
        d, din = cfg.model_dim, cfg.feat_dim

        def w(shape):
            return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=True)

        self.proj_w = w((din, d))
        self.proj_b = Tensor(np.zeros(d), requires_grad=True)
        self.cls = w((1, d))
        self.blocks = [init_block_params(d, cfg.n_heads, rng) for _ in range(2)]
        self.head_w = w((d, cfg.n_classes))
        self.head_b = Tensor(np.zeros(cfg.n_classes), requires_grad=True)
        self.params = {"proj.w": self.proj_w, "proj.b": self.proj_b, "cls": self.cls}
        self.decay_names = {"proj.w", "cls", "head.w"}
        for l, bp in enumerate(self.blocks):
            decayed = bp.decayed()
            for fname, tensor in bp.named().items():
                self.params[f"block.{l}.{fname}"] = tensor
                if fname in decayed:
                    self.decay_names.add(f"block.{l}.{fname}")
        self.params["head.w"] = self.head_w
        self.params["head.b"] = self.head_b

    def forward(self, sample: SampleRecord, mask, rng, training: bool) -> BaselineTrace:
        mods = _gather_patches(self, sample, mask)
        stacked = np.concatenate([sample.bags[m].matrix for m in mods], axis=0)
        x = ad.linear(Tensor(stacked), self.proj_w, self.proj_b)
        tokens = ad.concat_rows([self.cls, x])
        records = []
        for bp in self.blocks:
            tokens, rec = block_forward(tokens, bp, rng, training, self.cfg.dropout_p)
            records.append(rec)
        cls_out = ad.take_rows(tokens, 0, 1)
        logits = ad.linear(cls_out, self.head_w, self.head_b)
        return BaselineTrace(
            penultimate=cls_out.data.reshape(-1).copy(),
            logits=logits,
            probabilities=ad.stable_softmax_np(logits.data.reshape(-1)),
            attention=records,
        )
