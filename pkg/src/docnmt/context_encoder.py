"""Self-attentive encoder for the preceding source sentences of a document."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import (
    DOCUMENT,
    AttentionMask,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    embed,
    residual_sublayer,
)
from .tensor import Tensor


@dataclass
class ContextRepresentation:
    """Encoded context: ``matrix`` is (B, M, D), ``padding`` is (B, M)."""

    matrix: Tensor
    padding: np.ndarray
    token_ids: np.ndarray

    @property
    def token_count(self) -> int:
        return self.matrix.shape[1]

    @property
    def source_positions(self) -> np.ndarray:
        """Column index of every context token (restarting at 0 per example)."""
        return np.broadcast_to(np.arange(self.token_count), self.token_ids.shape)

    def key_mask(self) -> AttentionMask:
        if not self.padding.any():
            return AttentionMask.none()
        return AttentionMask.padding(self.padding)

    def repeat(self, count: int) -> "ContextRepresentation":
        """Tile a single-example representation ``count`` times (beam decoding)."""
        idx = np.zeros(count, dtype=np.int64)
        return ContextRepresentation(
            T.index_select(self.matrix, idx, axis=0),
            self.padding[idx],
            self.token_ids[idx],
        )


class ContextEncoderLayer(Module):
    def __init__(self, dim, heads, filter_size, rng, dtype):
        self.self_attention = MultiHeadAttention(dim, heads, rng, dtype, DOCUMENT)
        self.self_attention_norm = LayerNorm(dim, dtype, DOCUMENT)
        self.ffn = FeedForward(dim, filter_size, rng, dtype, DOCUMENT)
        self.ffn_norm = LayerNorm(dim, dtype, DOCUMENT)

    def __call__(self, c: Tensor, mask: AttentionMask, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        a = self.self_attention(c, c, mask)
        a = residual_sublayer(c, T.dropout(a, dropout, rng), self.self_attention_norm)
        out = self.ffn(a, dropout, rng)
        return residual_sublayer(a, T.dropout(out, dropout, rng), self.ffn_norm)


class ContextEncoder(Module):
    """A stack of ``layers`` self-attention + feed-forward layers.

    The word embeddings are borrowed from the source side at call time; the
    encoder owns only document-level parameters.
    """

    def __init__(self, dim: int, heads: int, filter_size: int, layers: int,
                 rng: np.random.Generator, dtype=np.float32):
        if layers < 1:
            raise ConfigurationError(f"context encoder needs at least one layer, got {layers}")
        self.layers = [ContextEncoderLayer(dim, heads, filter_size, rng, dtype)
                       for _ in range(layers)]

    def __call__(self, context_ids: np.ndarray, padding: np.ndarray, embeddings: Embedding,
                 dropout: float = 0.0, rng: Optional[np.random.Generator] = None
                 ) -> ContextRepresentation:
        context_ids = np.asarray(context_ids, dtype=np.int64)
        padding = np.asarray(padding, dtype=bool)
        if context_ids.ndim != 2 or context_ids.shape[1] == 0:
            raise ContractError("context must hold at least one token (insert BOS upstream)")
        if padding.all(axis=1).any():
            raise ContractError("an example has an empty context (insert BOS upstream)")
        mask = AttentionMask.padding(padding) if padding.any() else AttentionMask.none()
        c = T.dropout(embed(context_ids, embeddings), dropout, rng)
        for layer in self.layers:
            c = layer(c, mask, dropout, rng)
        return ContextRepresentation(c, padding, context_ids)


def encode_context(context_tokens, encoder: ContextEncoder,
                   embeddings: Embedding) -> ContextRepresentation:
    """Encode one context token sequence (no padding); result has batch size 1."""
    ids = np.asarray(context_tokens, dtype=np.int64).reshape(1, -1)
    if ids.shape[1] == 0:
        raise ContractError("context must hold at least one token (insert BOS upstream)")
    return encoder(ids, np.zeros(ids.shape, dtype=bool), embeddings)
