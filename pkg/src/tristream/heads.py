"""Temporal heads over a (N, T, D) feature sequence, and the classifier."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as tn
from .modules import Linear, Module, glorot_uniform, ones, zeros
from .tensor import Tensor

HEAD_KINDS = ("bilstm", "attention", "none")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return tn.reshape(x, (1,) + x.shape), True
    return x, False


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise tn.ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    axes = list(range(k.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    scores = tn.matmul(q, tn.transpose(k, axes))
    return tn.softmax(tn.scale(scores, 1.0 / math.sqrt(q.shape[-1])), axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Weighted sum of value rows, weights from scaled query-key dot products.

    Shapes (..., T, d_k), (..., T, d_k), (..., T, d_v).
    """
    if k.shape[-2] != v.shape[-2]:
        raise tn.ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return tn.matmul(attention_weights(q, k), v)


RESIDUAL_INIT_SCALE = 0.1


class AttentionParams(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 4, d_k=None, d_v=None,
                 ffn_mult: int = 4):
        if dim % heads:
            raise ValueError(f"feature dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.d_k = d_k or dim // heads
        self.d_v = d_v or dim // heads
        self.w_q = glorot_uniform(rng, (dim, heads * self.d_k), dim, heads * self.d_k)
        self.w_k = glorot_uniform(rng, (dim, heads * self.d_k), dim, heads * self.d_k)
        self.w_v = glorot_uniform(rng, (dim, heads * self.d_v), dim, heads * self.d_v)
        self.out = Linear(rng, heads * self.d_v, dim)
        self.norm1_gain, self.norm1_shift = ones((dim,)), zeros((dim,))
        self.ffn1 = Linear(rng, dim, ffn_mult * dim)
        self.ffn2 = Linear(rng, ffn_mult * dim, dim)
        self.norm2_gain, self.norm2_shift = ones((dim,)), zeros((dim,))
        # residual branches start small so the block is close to identity
        self.out.weight.data *= RESIDUAL_INIT_SCALE
        self.ffn2.weight.data *= RESIDUAL_INIT_SCALE

    def __call__(self, x: Tensor) -> Tensor:
        return multi_head_attention(x, self)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, t, d = x.shape
    return tn.transpose(tn.reshape(x, (n, t, heads, d // heads)), (0, 2, 1, 3))


def multi_head_attention(x: Tensor, p: AttentionParams, taps: Optional[dict] = None) -> Tensor:
    """Self-attention block: heads, output projection, add & norm, FFN, add & norm.

    ``taps``, if given, receives the FFN pre-activation and both norm inputs.
    """
    x, squeeze = _batched(x)
    n, t, d = x.shape
    q = _split_heads(tn.matmul(x, p.w_q), p.heads)
    k = _split_heads(tn.matmul(x, p.w_k), p.heads)
    v = _split_heads(tn.matmul(x, p.w_v), p.heads)
    heads = scaled_dot_attention(q, k, v)  # (N, h, T, d_v)
    merged = tn.reshape(tn.transpose(heads, (0, 2, 1, 3)), (n, t, p.heads * p.d_v))
    s1 = tn.add(x, p.out(merged))
    y = tn.layernorm(s1, p.norm1_gain, p.norm1_shift)
    pre = p.ffn1(y)
    s2 = tn.add(y, p.ffn2(tn.relu(pre)))
    if taps is not None:
        taps.update(norm1_in=s1.data, ffn_pre=pre.data, norm2_in=s2.data)
    out = tn.layernorm(s2, p.norm2_gain, p.norm2_shift)
    return tn.reshape(out, (t, d)) if squeeze else out


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class LstmLayer(Module):
    """Gate weights for one LSTM layer; gate order i, f, g, o."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int):
        self.hidden = hidden
        self.w_x = glorot_uniform(rng, (d_in, 4 * hidden), d_in, hidden)
        self.w_h = tn.param(np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=1))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.b = tn.param(b)


def lstm_cell(x_t: Tensor, h_prev: Tensor, c_prev: Tensor, p: LstmLayer):
    """One LSTM step. Returns (h_t, c_t)."""
    z = tn.add(tn.matmul(x_t, p.w_x), tn.matmul(h_prev, p.w_h))
    return _gates(tn.bias_add(z, p.b, -1), c_prev, p.hidden)


def _gates(z: Tensor, c_prev: Tensor, hdim: int):
    i = tn.sigmoid(tn.slice_axis(z, 0, hdim, -1))
    f = tn.sigmoid(tn.slice_axis(z, hdim, 2 * hdim, -1))
    g = tn.tanh(tn.slice_axis(z, 2 * hdim, 3 * hdim, -1))
    o = tn.sigmoid(tn.slice_axis(z, 3 * hdim, 4 * hdim, -1))
    c = tn.add(tn.mul(f, c_prev), tn.mul(i, g))
    h = tn.mul(o, tn.tanh(c))
    return h, c


def run_lstm(x: Tensor, p: LstmLayer, reverse: bool = False) -> Tensor:
    """Scan a (N, T, D) sequence; output (N, T, H) in the input's time order."""
    n, t, _ = x.shape
    # input projection for all steps at once
    zx = tn.bias_add(tn.matmul(x, p.w_x), p.b, -1)
    h = Tensor(np.zeros((n, p.hidden)), dtype=x.data.dtype)
    c = h
    outs = [None] * t
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for s in steps:
        z = tn.add(tn.reshape(tn.slice_axis(zx, s, s + 1, 1), (n, 4 * p.hidden)), tn.matmul(h, p.w_h))
        h, c = _gates(z, c, p.hidden)
        outs[s] = h
    return tn.stack(outs, axis=1)


class LstmParams(Module):
    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, layers: int = 2):
        self.forward = [LstmLayer(rng, dim if i == 0 else hidden, hidden) for i in range(layers)]
        self.backward = [LstmLayer(rng, dim if i == 0 else hidden, hidden) for i in range(layers)]

    @property
    def hidden(self) -> int:
        return self.forward[0].hidden

    def __call__(self, x: Tensor) -> Tensor:
        return bilstm_head(x, self)


def bilstm_head(x: Tensor, p: LstmParams) -> Tensor:
    """Stacked forward scan and stacked backward scan, concatenated per timestep."""
    x, squeeze = _batched(x)
    fwd, bwd = x, x
    for layer in p.forward:
        fwd = run_lstm(fwd, layer)
    for layer in p.backward:
        bwd = run_lstm(bwd, layer, reverse=True)
    out = tn.concat([fwd, bwd], axis=-1)
    return tn.reshape(out, out.shape[1:]) if squeeze else out


class Classifier(Module):
    def __init__(self, rng: np.random.Generator, dim: int, num_classes: int):
        self.fc = Linear(rng, dim, num_classes)

    def __call__(self, head_out: Tensor, dropout_p: float = 0.0, rng=None) -> Tensor:
        return classify(head_out, self, dropout_p, self.training, rng)


def classify(head_out: Tensor, p: Classifier, dropout_p: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Temporal mean-pool then affine map to class logits."""
    x, squeeze = _batched(head_out)
    pooled = tn.dropout(tn.mean(x, axis=1), dropout_p, training, rng)
    logits = p.fc(pooled)
    return tn.reshape(logits, logits.shape[1:]) if squeeze else logits


def head_output_dim(kind: str, dim: int, lstm_hidden: int) -> int:
    if kind == "bilstm":
        return 2 * lstm_hidden
    return dim


def build_head(kind: str, rng: np.random.Generator, dim: int, heads: int = 4, lstm_hidden: int = 48):
    if kind == "attention":
        return AttentionParams(rng, dim, heads)
    if kind == "bilstm":
        return LstmParams(rng, dim, lstm_hidden)
    if kind == "none":
        return None
    raise ValueError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
