"""Transformer building blocks.

Layout convention: a sequence is a ``(batch, length, hidden)`` tensor, one
row per position.  Weight matrices act on rows from the right, so a
projection ``W`` of shape ``(D_in, D_out)`` maps ``x`` to ``x @ W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor

SENTENCE = "sentence"
DOCUMENT = "document"
PARTITIONS = (SENTENCE, DOCUMENT)


class Parameter(Tensor):
    """A trainable tensor tagged with its partition (sentence or document level)."""

    __slots__ = ("tag",)

    def __init__(self, data, tag: str = SENTENCE):
        if tag not in PARTITIONS:
            raise ContractError(f"unknown partition tag {tag!r}")
        super().__init__(data, requires_grad=True)
        self.tag = tag


class Module:
    """Minimal container that discovers parameters through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def uniform_fan_in(rng: np.random.Generator, shape: tuple, dtype) -> np.ndarray:
    """Uniform init with variance ``1/fan_in`` (fan-in is the first axis)."""
    limit = math.sqrt(3.0 / shape[0])
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------- masks
@dataclass(frozen=True)
class AttentionMask:
    """Blocked (query, key) pairs; ``blocked`` broadcasts to (B, 1, Lq, Lk)."""

    kind: str
    blocked: Optional[np.ndarray] = None

    @classmethod
    def none(cls) -> "AttentionMask":
        return cls("none", None)

    @classmethod
    def padding(cls, key_padding: np.ndarray) -> "AttentionMask":
        key_padding = np.asarray(key_padding, dtype=bool)
        return cls("padding", key_padding[:, None, None, :])

    @classmethod
    def causal(cls, length: int) -> "AttentionMask":
        future = np.triu(np.ones((length, length), dtype=bool), k=1)
        return cls("causal", future[None, None])

    def __or__(self, other: "AttentionMask") -> "AttentionMask":
        if self.blocked is None:
            return other
        if other.blocked is None:
            return self
        kinds = sorted({self.kind, other.kind})
        return AttentionMask("+".join(kinds), self.blocked | other.blocked)


def padding_causal_mask(key_padding: np.ndarray) -> AttentionMask:
    return AttentionMask.padding(key_padding) | AttentionMask.causal(key_padding.shape[1])


# ------------------------------------------------------------- embeddings
def positional_encoding(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encodings, shape ``(length, dim)``.

    Entry ``(pos, 2i)`` is ``sin(pos / 10000^(2i/dim))`` and ``(pos, 2i+1)``
    the matching cosine.
    """
    if dim % 2:
        raise ConfigurationError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos / rates)
    table[:, 1::2] = np.cos(pos / rates)
    return table.astype(dtype)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32, tag: str = SENTENCE):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = Parameter(rng.standard_normal((vocab_size, dim)).astype(dtype), tag)

    def __call__(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        return embed(ids, self, offset)


def embed(ids, table: Embedding, offset: int = 0) -> Tensor:
    """Word embedding plus positional encoding for ``ids`` of shape (B, L) or (L,).

    ``offset`` shifts the positions (used when decoding one step at a time).
    """
    ids = np.asarray(ids, dtype=np.int64)
    words = T.embedding_lookup(table.weight, ids)
    length = ids.shape[-1]
    pe = positional_encoding(offset + length, table.dim, table.weight.dtype)[offset:]
    return words + Tensor(pe)


# -------------------------------------------------------------- attention
class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, tag: str = SENTENCE):
        if dim % heads:
            raise ConfigurationError(f"hidden size {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_q = Parameter(uniform_fan_in(rng, (dim, dim), dtype), tag)
        self.w_k = Parameter(uniform_fan_in(rng, (dim, dim), dtype), tag)
        self.w_v = Parameter(uniform_fan_in(rng, (dim, dim), dtype), tag)
        self.w_o = Parameter(uniform_fan_in(rng, (dim, dim), dtype), tag)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def split_heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def project_memory(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        """Per-head keys and values, shape (B, h, Lk, d_h) each."""
        return (self.split_heads(memory @ self.w_k),
                self.split_heads(memory @ self.w_v))

    def attend(self, query: Tensor, keys: Tensor, values: Tensor,
               mask: AttentionMask, weights_out: Optional[list] = None) -> Tensor:
        b, lq, _ = query.shape
        q = self.split_heads(query @ self.w_q)
        scores = (q @ keys.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.head_dim))
        blocked = mask.blocked
        if blocked is not None:
            full = np.broadcast_to(blocked, scores.shape[:1] + (1,) + scores.shape[2:])
            if full.all(axis=-1).any():
                raise ContractError("attention row has every key masked")
        probs = T.softmax(scores, axis=-1, mask=blocked)
        if weights_out is not None:
            weights_out.append(probs.data)
        context = (probs @ values).transpose(0, 2, 1, 3).reshape(b, lq, self.dim)
        return context @ self.w_o

    def __call__(self, query: Tensor, memory: Tensor, mask: Optional[AttentionMask] = None,
                 weights_out: Optional[list] = None) -> Tensor:
        return multi_head_attention(query, memory, memory, mask, self, weights_out)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[AttentionMask], params: MultiHeadAttention,
                         weights_out: Optional[list] = None) -> Tensor:
    """Scaled dot-product attention over ``params.heads`` heads.

    ``q`` is (B, Lq, D); ``k`` and ``v`` are (B, Lk, D).  Blocked pairs in
    ``mask`` receive exactly zero weight.  When ``weights_out`` is a list the
    (B, h, Lq, Lk) weight array is appended to it.
    """
    if k.shape != v.shape:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in shape")
    if q.shape[0] != k.shape[0] or q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query {q.shape} incompatible with keys {k.shape}")
    mask = mask or AttentionMask.none()
    if mask.blocked is not None:
        try:
            np.broadcast_shapes(mask.blocked.shape, (q.shape[0], 1, q.shape[1], k.shape[1]))
        except ValueError:
            raise DimensionError(
                f"mask {mask.blocked.shape} does not match query {q.shape[1]} x key {k.shape[1]}"
            ) from None
    keys = params.split_heads(k @ params.w_k)
    values = params.split_heads(v @ params.w_v)
    return params.attend(q, keys, values, mask, weights_out)


# ------------------------------------------------------------ feed-forward
class FeedForward(Module):
    def __init__(self, dim: int, filter_size: int, rng: np.random.Generator,
                 dtype=np.float32, tag: str = SENTENCE):
        self.w_1 = Parameter(uniform_fan_in(rng, (dim, filter_size), dtype), tag)
        self.b_1 = Parameter(np.zeros(filter_size, dtype=dtype), tag)
        self.w_2 = Parameter(uniform_fan_in(rng, (filter_size, dim), dtype), tag)
        self.b_2 = Parameter(np.zeros(dim, dtype=dtype), tag)

    def __call__(self, x: Tensor, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return feed_forward(x, self, dropout, rng)


def feed_forward(x: Tensor, params: FeedForward, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Position-wise ``relu(x W1 + b1) W2 + b2``."""
    hidden = T.relu(x @ params.w_1 + params.b_1)
    hidden = T.dropout(hidden, dropout, rng)
    return hidden @ params.w_2 + params.b_2


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, tag: str = SENTENCE):
        self.gain = Parameter(np.ones(dim, dtype=dtype), tag)
        self.bias = Parameter(np.zeros(dim, dtype=dtype), tag)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


def residual_sublayer(h: Tensor, sublayer_output: Tensor, norm: LayerNorm) -> Tensor:
    """``LayerNorm(h + sublayer_output)``."""
    if h.shape != sublayer_output.shape:
        raise DimensionError(
            f"residual shapes differ: {h.shape} vs {sublayer_output.shape}"
        )
    return norm(h + sublayer_output)
