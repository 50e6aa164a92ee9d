import math

import numpy as np
import pytest

from unicorn_mil import autodiff as ad
from unicorn_mil.data import FeatureBag, SampleRecord
from unicorn_mil.model import ModelConfig, UnicornModel
from unicorn_mil.rng import Rng


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return np.abs(a - b) / denom


def finite_difference(loss_fn, tensor, h=1e-6):
    """Central differences of a scalar-returning closure w.r.t. one tensor."""
    out = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = loss_fn()
        flat[i] = orig - h
        lo = loss_fn()
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * h)
    return out


def check_gradients(loss_builder, tensors, tol=1e-5, h=1e-6):
    """loss_builder() must rebuild the graph from the tensors' current data."""
    loss = loss_builder()
    for t in tensors:
        t.zero_grad()
    ad.backward(loss)
    for t in tensors:
        with ad.no_grad():
            fd = finite_difference(lambda: loss_builder().item(), t, h)
        worst = rel_err(t.grad, fd).max()
        assert worst < tol, f"gradient mismatch {worst:.3g} for shape {t.data.shape}"


def make_sample(rng, feat_dim=8, n_patches=(2, 3, 4, 2), label=1, modalities=(0, 1, 2, 3)):
    bags = {
        m: FeatureBag(m, f"slide{m}", rng.normal((n_patches[i], feat_dim)))
        for i, m in enumerate(modalities)
    }
    return SampleRecord("s0", "ind0", "seg0", label, bags)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(feat_dim=8, model_dim=16, n_heads=4)
    return UnicornModel(cfg, Rng(11))


def straight_line_block(x, p, n_heads):
    """Independent plain-numpy restatement of the block equations."""

    def ln(v, g, b, eps=1e-5):
        mu = v.mean(axis=1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    def sm(v):
        e = np.exp(v - v.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def gelu(v):
        c = math.sqrt(2.0 / math.pi)
        return 0.5 * v * (1.0 + np.tanh(c * (v + 0.044715 * v ** 3)))

    t, d = x.shape
    dh = d // n_heads
    normed = ln(x, p.ln1_gain.data, p.ln1_bias.data)
    q, k, v = normed @ p.wq.data, normed @ p.wk.data, normed @ p.wv.data
    mixed = np.zeros_like(x)
    attn_heads = []
    for h in range(n_heads):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        a = sm(qs @ ks.T / math.sqrt(dh))
        attn_heads.append(a)
        mixed[:, h * dh:(h + 1) * dh] = a @ vs
    x1 = x + mixed @ p.wo.data
    hidden = gelu(ln(x1, p.ln2_gain.data, p.ln2_bias.data) @ p.mlp_w1.data + p.mlp_b1.data)
    out = x1 + hidden @ p.mlp_w2.data + p.mlp_b2.data
    return out, np.stack(attn_heads)
