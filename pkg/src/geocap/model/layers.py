"""Transformer building blocks on top of the autodiff engine.

Post-norm encoder/decoder layers in the classic arrangement: multi-head
attention and a two-layer feedforward, each wrapped in dropout, residual
connection and layer normalization. All modules operate on single
sequences of shape (length, width); there is no batch axis.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAYER_NORM_EPS = 1e-5
_NEG_INF = -1e9


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position encodings of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, idx / dim)
    enc = np.zeros((length, dim), dtype=np.float64)
    enc[:, 0::2] = np.sin(angle)
    enc[:, 1::2] = np.cos(angle[:, : dim // 2])
    return enc.astype(dtype)


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive attention mask hiding positions after the query position."""
    mask = np.triu(np.full((length, length), _NEG_INF, dtype=dtype), k=1)
    return mask


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype, bias=True):
        bound = 1.0 / math.sqrt(in_dim)
        self.weight = ad.parameter(rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype))
        self.bias = ad.parameter(np.zeros(out_dim, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out

    def parameters(self):
        params = [("weight", self.weight)]
        if self.bias is not None:
            params.append(("bias", self.bias))
        return params


class LayerNorm:
    def __init__(self, dim: int, dtype):
        self.gamma = ad.parameter(np.ones(dim, dtype=dtype))
        self.beta = ad.parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, LAYER_NORM_EPS)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class MultiHeadAttention:
    def __init__(self, dim: int, heads: int, dropout: float, rng, dtype):
        if dim % heads != 0:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout = dropout
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def _split(self, x: Tensor, length: int) -> Tensor:
        # (length, dim) -> (heads, length, head_dim)
        return ad.swapaxes(ad.reshape(x, (length, self.heads, self.head_dim)), 0, 1)

    def __call__(self, query: Tensor, memory: Tensor, mask=None, training=False, rng=None) -> Tensor:
        q_len = query.data.shape[0]
        m_len = memory.data.shape[0]
        q = self._split(self.wq(query), q_len)
        k = self._split(self.wk(memory), m_len)
        v = self._split(self.wv(memory), m_len)
        scores = ad.matmul(q, ad.swapaxes(k, 1, 2))
        scores = ad.scale(scores, 1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        attn = ad.softmax_last(scores)
        if training and self.dropout > 0.0:
            attn = ad.dropout(attn, self.dropout, rng)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.swapaxes(ctx, 0, 1), (q_len, self.dim))
        return self.wo(ctx)

    def parameters(self):
        out = []
        for name, mod in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{name}.{p}", t) for p, t in mod.parameters())
        return out


class FeedForward:
    def __init__(self, dim: int, hidden: int, dropout: float, rng, dtype):
        self.lin1 = Linear(dim, hidden, rng, dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, training=False, rng=None) -> Tensor:
        h = ad.relu(self.lin1(x))
        if training and self.dropout > 0.0:
            h = ad.dropout(h, self.dropout, rng)
        return self.lin2(h)

    def parameters(self):
        out = [(f"lin1.{p}", t) for p, t in self.lin1.parameters()]
        out.extend((f"lin2.{p}", t) for p, t in self.lin2.parameters())
        return out


def _residual(x: Tensor, sub: Tensor, dropout: float, norm: LayerNorm, training, rng) -> Tensor:
    if training and dropout > 0.0:
        sub = ad.dropout(sub, dropout, rng)
    return norm(ad.add(x, sub))


class EncoderLayer:
    def __init__(self, dim, heads, ff_dim, dropout, rng, dtype):
        self.attn = MultiHeadAttention(dim, heads, dropout, rng, dtype)
        self.ff = FeedForward(dim, ff_dim, dropout, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, training=False, rng=None) -> Tensor:
        x = _residual(x, self.attn(x, x, None, training, rng), self.dropout, self.norm1, training, rng)
        x = _residual(x, self.ff(x, training, rng), self.dropout, self.norm2, training, rng)
        return x

    def parameters(self):
        out = [(f"attn.{p}", t) for p, t in self.attn.parameters()]
        out.extend((f"ff.{p}", t) for p, t in self.ff.parameters())
        out.extend((f"norm1.{p}", t) for p, t in self.norm1.parameters())
        out.extend((f"norm2.{p}", t) for p, t in self.norm2.parameters())
        return out


class DecoderLayer:
    def __init__(self, dim, heads, ff_dim, dropout, rng, dtype):
        self.self_attn = MultiHeadAttention(dim, heads, dropout, rng, dtype)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout, rng, dtype)
        self.ff = FeedForward(dim, ff_dim, dropout, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.dropout = dropout

    def __call__(self, x: Tensor, memory: Tensor, mask, training=False, rng=None) -> Tensor:
        x = _residual(
            x, self.self_attn(x, x, mask, training, rng), self.dropout, self.norm1, training, rng
        )
        x = _residual(
            x, self.cross_attn(x, memory, None, training, rng), self.dropout, self.norm2, training, rng
        )
        x = _residual(x, self.ff(x, training, rng), self.dropout, self.norm3, training, rng)
        return x

    def parameters(self):
        out = [(f"self_attn.{p}", t) for p, t in self.self_attn.parameters()]
        out.extend((f"cross_attn.{p}", t) for p, t in self.cross_attn.parameters())
        out.extend((f"ff.{p}", t) for p, t in self.ff.parameters())
        for i, norm in enumerate((self.norm1, self.norm2, self.norm3), start=1):
            out.extend((f"norm{i}.{p}", t) for p, t in norm.parameters())
        return out


class TransformerEncoder:
    """Stack of encoder layers; no positional encoding is added, so the
    output is permutation-equivariant in the input rows."""

    def __init__(self, layers, dim, heads, ff_dim, dropout, rng, dtype):
        self.layers = [EncoderLayer(dim, heads, ff_dim, dropout, rng, dtype) for _ in range(layers)]

    def __call__(self, x: Tensor, training=False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, training, rng)
        return x

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{p}", t) for p, t in layer.parameters())
        return out


class TransformerDecoder:
    def __init__(self, layers, dim, heads, ff_dim, dropout, rng, dtype):
        self.layers = [DecoderLayer(dim, heads, ff_dim, dropout, rng, dtype) for _ in range(layers)]

    def __call__(self, x: Tensor, memory: Tensor, mask, training=False, rng=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, mask, training, rng)
        return x

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"layers.{i}.{p}", t) for p, t in layer.parameters())
        return out
