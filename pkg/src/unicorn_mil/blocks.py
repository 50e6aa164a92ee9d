"""The repeated transformer unit: multi-head self-attention plus MLP.

Pre-norm residual wiring, ViT style:

    x <- x + MHA(LN(x))
    x <- x + dropout(MLP(LN(x)))

Attention logits are scaled by 1/sqrt(d/heads). There are no positional
encodings anywhere: token bags are unordered sets, so a block is
permutation-equivariant by construction (and tested as such). Post-softmax
attention matrices are captured per head for the explainability pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .rng import Rng

INIT_STD = 0.02
MLP_WIDTH_FACTOR = 4


@dataclass
class BlockParams:
    """Learned tensors of one block. Attention projections carry no bias."""

    n_heads: int
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    def named(self) -> dict[str, Tensor]:
        """Field name -> tensor, in a fixed order."""
        return {
            "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
            "ln1_gain": self.ln1_gain, "ln1_bias": self.ln1_bias,
            "ln2_gain": self.ln2_gain, "ln2_bias": self.ln2_bias,
            "mlp_w1": self.mlp_w1, "mlp_b1": self.mlp_b1,
            "mlp_w2": self.mlp_w2, "mlp_b2": self.mlp_b2,
        }

    def decayed(self) -> set[str]:
        """Names of fields weight decay applies to (matrices only)."""
        return {"wq", "wk", "wv", "wo", "mlp_w1", "mlp_w2"}


@dataclass
class AttentionRecord:
    """Post-softmax attention of one block invocation: (heads, T, T)."""

    heads: np.ndarray

    @property
    def n_heads(self) -> int:
        return self.heads.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.heads.shape[1]


def init_block_params(dim: int, n_heads: int, rng: Rng) -> BlockParams:
    if dim % n_heads:
        raise ShapeError(f"model dim {dim} not divisible by {n_heads} heads")
    hidden = MLP_WIDTH_FACTOR * dim

    def w(shape):
        return Tensor(rng.truncated_normal(shape, INIT_STD), requires_grad=True)

    def const(shape, value):
        return Tensor(np.full(shape, value), requires_grad=True)

    return BlockParams(
        n_heads=n_heads,
        wq=w((dim, dim)), wk=w((dim, dim)), wv=w((dim, dim)), wo=w((dim, dim)),
        ln1_gain=const((dim,), 1.0), ln1_bias=const((dim,), 0.0),
        ln2_gain=const((dim,), 1.0), ln2_bias=const((dim,), 0.0),
        mlp_w1=w((dim, hidden)), mlp_b1=const((hidden,), 0.0),
        mlp_w2=w((hidden, dim)), mlp_b2=const((dim,), 0.0),
    )


def block_forward(
    tokens: Tensor,
    params: BlockParams,
    rng: Rng | None,
    training: bool,
    dropout_p: float = 0.1,
) -> tuple[Tensor, AttentionRecord]:
    """Run one block over a (T, d) token matrix.

    Returns the transformed tokens and the captured attention record.
    """
    t, d = tokens.data.shape
    if t < 1:
        raise ShapeError("block_forward needs at least one token")

    normed = ad.layer_norm(tokens, params.ln1_gain, params.ln1_bias)
    mixed, attn = ad.multi_head_attention(
        normed @ params.wq, normed @ params.wk, normed @ params.wv, params.n_heads
    )
    record = AttentionRecord(heads=attn)
    x = tokens + mixed @ params.wo

    normed2 = ad.layer_norm(x, params.ln2_gain, params.ln2_bias)
    hidden = ad.gelu(ad.linear(normed2, params.mlp_w1, params.mlp_b1))
    mlp_out = ad.linear(hidden, params.mlp_w2, params.mlp_b2)
    x = x + ad.dropout(mlp_out, dropout_p, rng, training)
    return x, record


def head_mean_attention(record: AttentionRecord) -> np.ndarray:
    """Arithmetic mean over heads; rows remain stochastic."""
    return record.heads.mean(axis=0)
