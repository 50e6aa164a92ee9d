"""Dense float64 tensors with reverse-mode automatic differentiation.

Design constraints, in rough order of importance:

* everything is 64-bit so central-difference gradient checks are meaningful;
* backward rules are small, hand-derived, and individually testable;
* tensors are rank 3 at most (batch size is one throughout the model) and
  the only broadcasting is adding a 1-D bias row;
* any operation that produces a NaN or Inf raises :class:`NumericError`
  immediately instead of letting it propagate.

The graph is recorded implicitly: each op output keeps references to its
parents and a vector-Jacobian-product closure. ``backward`` walks the
reverse topological order and accumulates gradients additively, so a
tensor used twice sums both contributions and two backward calls without
a grad reset exactly double every gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True


class no_grad:
    """Disable graph recording inside a ``with`` block (values unchanged)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _finite(arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError("non-finite value produced by tensor operation")
    return arr


def _finite_fast(arr: np.ndarray) -> None:
    # one reduction instead of a bool temp; a NaN/Inf anywhere poisons the sum
    if not math.isfinite(float(arr.sum())):
        _finite(arr)


class Tensor:
    """Rank <= 3 float64 array, optionally tracked on the autodiff graph.

    ``grad`` is an accumulator of identical shape, present iff
    ``requires_grad``; it is never mutated in place by the engine, only
    replaced, so callers may hold references to past values safely.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank-{arr.ndim} tensor not supported (max rank 3)")
        _finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, vjp) -> "Tensor":
        _finite_fast(data)
        t = cls.__new__(cls)
        t.data = data
        t._grad = None
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            t.requires_grad = True
            t._parents = tuple(parents)
            t._vjp = vjp
        else:
            t.requires_grad = False
            t._parents = ()
            t._vjp = None
        return t

    # -- gradient accumulator ----------------------------------------------

    @property
    def grad(self):
        if self.requires_grad and self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = np.zeros_like(self.data) if self.requires_grad else None

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0)) if isinstance(other, Tensor) else add(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Graph:
    """Topologically ordered record of the operations reachable from a root.

    ``nodes`` lists leaves first and the root last; ``backward`` traverses
    it in exact reverse order.
    """

    nodes: list

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every reachable requires_grad tensor.

    Contributions add onto whatever ``grad`` already holds.
    """
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    graph = Graph.trace(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node._grad = g if node._grad is None else node._grad + g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = pending.get(id(parent))
            pending[id(parent)] = pg if acc is None else acc + pg


# -- primitive operations ----------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias row or a python scalar."""
    if not isinstance(b, Tensor):
        return Tensor._from_op(a.data + float(b), (a,), lambda g: (g,))
    if a.data.shape == b.data.shape:
        return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.data.shape[-1] == b.data.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return Tensor._from_op(
            a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes) if axes else g)
        )
    raise ShapeError(f"cannot add shapes {a.data.shape} and {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cannot multiply shapes {a.data.shape} and {b.data.shape}")
    return Tensor._from_op(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data)
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked 3-D x 3-D with equal batch."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.ndim != bd.ndim:
        raise ShapeError(f"matmul needs equal-rank 2-D or 3-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul extents mismatch: {ad.shape} @ {bd.shape}")

    def vjp(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return Tensor._from_op(ad @ bd, (a, b), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return Tensor._from_op(
        a.data.swapaxes(-1, -2), (a,), lambda g: (g.swapaxes(-1, -2),)
    )


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(T, d) -> (heads, T, d/heads)."""
    t, d = x.data.shape
    if d % n_heads:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    out = x.data.reshape(t, n_heads, dh).transpose(1, 0, 2)
    return Tensor._from_op(
        out, (x,), lambda g: (np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(t, d),)
    )


def merge_heads(x: Tensor) -> Tensor:
    """(heads, T, dh) -> (T, heads*dh). Inverse of split_heads."""
    h, t, dh = x.data.shape
    out = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, h * dh)
    return Tensor._from_op(
        out, (x,), lambda g: (g.reshape(t, h, dh).transpose(1, 0, 2),)
    )


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    width = parts[0].data.shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[-1] != width:
            raise ShapeError("concat parts must be 2-D with equal width")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp)


def take_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError("take_rows needs a 2-D tensor")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[start:stop], (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b as a single graph node (2-D x, 1-D bias)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.shape != (w.data.shape[1],):
        raise ShapeError(
            f"linear needs (n,k) @ (k,m) + (m,), got {x.data.shape} {w.data.shape} {b.data.shape}"
        )
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear extents mismatch: {x.data.shape} @ {w.data.shape}")

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._from_op(x.data @ w.data + b.data, (x, w, b), vjp)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> tuple[Tensor, np.ndarray]:
    """Fused scaled dot-product attention over heads for (T, d) inputs.

    Numerically identical to composing split_heads / matmul / softmax /
    merge_heads, but one graph node, which keeps whole-model
    finite-difference sweeps affordable. Also returns the post-softmax
    attention stack (heads, T, T) for explainability capture.
    """
    t, d = q.data.shape
    if d % n_heads:
        raise ShapeError(f"model dim {d} not divisible by {n_heads} heads")
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise ShapeError("q, k, v must share one shape")
    dh = d // n_heads
    factor = 1.0 / math.sqrt(dh)

    def heads_of(arr):
        return arr.reshape(t, n_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = heads_of(q.data), heads_of(k.data), heads_of(v.data)
    scores = (qh @ kh.swapaxes(1, 2)) * factor
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.ascontiguousarray((attn @ vh).transpose(1, 0, 2)).reshape(t, d)

    def merge(arr):
        return np.ascontiguousarray(arr.transpose(1, 0, 2)).reshape(t, d)

    def vjp(g):
        gh = heads_of(g)
        d_attn = gh @ vh.swapaxes(1, 2)
        d_vh = attn.swapaxes(1, 2) @ gh
        d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
        d_scores *= factor
        d_qh = d_scores @ kh
        d_kh = d_scores.swapaxes(1, 2) @ qh
        return merge(d_qh), merge(d_kh), merge(d_vh)

    return Tensor._from_op(out, (q, k, v), vjp), attn.copy()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``; rows sum to one."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis followed by an affine map."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        leading = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=leading) if leading else g * xhat
        dbias = g.sum(axis=leading) if leading else g
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._from_op(out, (x, gain, bias), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    sq = x.data * x.data
    th = np.tanh(_GELU_C * (x.data + _GELU_A * sq * x.data))
    out = 0.5 * x.data * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * sq)
        d = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du
        return (g * d,)

    return Tensor._from_op(out, (x,), vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Zero entries with probability ``p``, scaling survivors by 1/(1-p).

    Identity (the same tensor, bit-exact, no rng draw) when not training
    or p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= p).astype(np.float64) / (1.0 - p)
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,))


def sum_all(x: Tensor) -> Tensor:
    return Tensor._from_op(
        np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),)
    )


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] as a scalar tensor."""
    flat = logits.data.reshape(-1)
    n = flat.shape[0]
    if not 0 <= label < n:
        raise ShapeError(f"label {label} out of range for {n} classes")
    m = flat.max()
    shifted = flat - m
    lse = m + math.log(np.exp(shifted).sum())
    loss = np.asarray(lse - flat[label])

    def vjp(g):
        probs = np.exp(shifted) / np.exp(shifted).sum()
        probs[label] -= 1.0
        return ((float(g) * probs).reshape(logits.data.shape),)

    return Tensor._from_op(loss, (logits,), vjp)


def stable_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax for post-hoc analysis paths (no graph)."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
