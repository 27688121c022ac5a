"""Greedy and beam-search decoding; sentence-by-sentence document translation."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import ParallelDocument, extract_context
from .errors import ConfigurationError, ContractError
from .model import BOS_ID, EOS_ID, PAD_ID, DocTransformer
from .tensor import no_grad


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 4
    alpha: float = 0.6
    max_length: Optional[int] = None
    banned: tuple = (PAD_ID, BOS_ID)
    use_cache: bool = True
    min_length: int = 0  # EOS is blocked until this many tokens exist

    def blocked(self, generated: int) -> list[int]:
        extra = [EOS_ID] if generated < self.min_length else []
        return list(self.banned) + extra

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigurationError(f"beam_size must be >= 1, got {self.beam_size}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.max_length is not None and self.max_length < 1:
            raise ConfigurationError("max_length must be >= 1")
        if self.min_length < 0:
            raise ConfigurationError("min_length must be >= 0")

    def length_limit(self, source_length: int) -> int:
        return self.max_length if self.max_length is not None else 2 * source_length + 10


def length_penalty(length: int, alpha: float) -> float:
    """``((5 + length) / 6) ** alpha``; 1 for every length when alpha is 0."""
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list[int]
    log_prob: float

    @property
    def finished(self) -> bool:
        return len(self.tokens) > 1 and self.tokens[-1] == EOS_ID

    @property
    def length(self) -> int:
        """Generated tokens, EOS included, BOS excluded."""
        return len(self.tokens) - 1

    def score(self, alpha: float) -> float:
        return self.log_prob / length_penalty(self.length, alpha)

    def output(self) -> list[int]:
        body = self.tokens[1:]
        return body[:-1] if self.finished else body


def _source_length(source) -> int:
    source = list(source)
    return len(source) - 1 if source and source[-1] == EOS_ID else len(source)


class _Scorer:
    """Next-token log-probs for rows of growing prefixes of one sentence."""

    def __init__(self, model: DocTransformer, source, context, use_cache: bool):
        self.model = model
        self.use_cache = use_cache
        self.source = np.asarray(source, dtype=np.int64)
        self.context = None if context is None else np.asarray(context, dtype=np.int64)
        if use_cache:
            self.state = model.start_decoding(self.source, self.context, copies=1)
        else:
            ctx = None
            if model.config.uses_context:
                ids = self.context[None]
                ctx = model.encode_context(ids, np.zeros(ids.shape, dtype=bool))
            self.memory = model.encode_source(self.source[None], None, ctx)
            self.ctx = ctx

    def step(self, prefixes: list[list[int]], parents: Sequence[int]) -> np.ndarray:
        if self.use_cache:
            self.state.reorder(parents)
            return self.model.decode_step(self.state, [p[-1] for p in prefixes])
        rows = []
        for prefix in prefixes:
            logits = self.model.decode_prefix(prefix, self.memory, self.ctx)
            rows.append(T.log_softmax(logits, axis=-1).data[-1])
        return np.stack(rows)


def _check_source(source) -> None:
    if len(source) == 0:
        raise ContractError("cannot translate an empty source sentence")


def greedy_search(model: DocTransformer, source, context=None,
                  cfg: DecodeConfig = DecodeConfig(beam_size=1)) -> list[int]:
    """Stepwise argmax decoding; returns generated ids without BOS/EOS."""
    _check_source(source)
    limit = cfg.length_limit(_source_length(source))
    tokens = [BOS_ID]
    with no_grad():
        scorer = _Scorer(model, source, context, cfg.use_cache)
        for step in range(limit):
            logp = scorer.step([tokens], [0])[0].copy()
            logp[cfg.blocked(step)] = -np.inf
            token = int(np.argmax(logp))
            tokens.append(token)
            if token == EOS_ID:
                break
    return Hypothesis(tokens, 0.0).output()


def beam_search_hypotheses(model: DocTransformer, source, context=None,
                           cfg: DecodeConfig = DecodeConfig()) -> tuple[list, list]:
    """Run beam search; return (finished, alive) hypotheses at termination."""
    _check_source(source)
    limit = cfg.length_limit(_source_length(source))
    alive = [Hypothesis([BOS_ID], 0.0)]
    parents = [0]
    finished: list[Hypothesis] = []
    with no_grad():
        scorer = _Scorer(model, source, context, cfg.use_cache)
        for step in range(limit):
            logp = scorer.step([h.tokens for h in alive], parents)
            logp = logp.astype(np.float64)
            logp[:, cfg.blocked(step)] = -np.inf
            candidates = []
            for row, hyp in enumerate(alive):
                for token in np.flatnonzero(np.isfinite(logp[row])):
                    candidates.append((hyp.log_prob + float(logp[row, token]),
                                       hyp.tokens + [int(token)], row))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            alive, parents = [], []
            for score, tokens, row in candidates[:cfg.beam_size]:
                hyp = Hypothesis(tokens, score)
                if hyp.finished:
                    finished.append(hyp)
                else:
                    alive.append(hyp)
                    parents.append(row)
            if not alive:
                break
            if finished:
                best = max(h.score(cfg.alpha) for h in finished)
                bound = max(h.log_prob for h in alive) / length_penalty(limit, cfg.alpha)
                if best > bound:
                    break
    return finished, alive


def _best(hyps: list[Hypothesis], alpha: float) -> Hypothesis:
    return min(hyps, key=lambda h: (-h.score(alpha), h.tokens))


def beam_search(model: DocTransformer, source, context=None,
                cfg: DecodeConfig = DecodeConfig()) -> list[int]:
    """Best length-penalised finished hypothesis (or best unfinished one)."""
    finished, alive = beam_search_hypotheses(model, source, context, cfg)
    return _best(finished or alive, cfg.alpha).output()


def translate_sentence(model: DocTransformer, source, context=None,
                       cfg: DecodeConfig = DecodeConfig()) -> list[int]:
    source = list(source)
    if not source or source[-1] != EOS_ID:
        source = source + [EOS_ID]
    if model.config.uses_context and context is None:
        context = [BOS_ID]
    if cfg.beam_size == 1:
        return greedy_search(model, source, context, cfg)
    return beam_search(model, source, context, cfg)


def translate_document(source_sentences: Sequence[Sequence[int]], model: DocTransformer,
                       cfg: DecodeConfig = DecodeConfig(), window: Optional[int] = None,
                       threads: int = 1) -> list[list[int]]:
    """Translate sentences k = 1..K of one document.

    Context comes from the preceding *source* sentences only, so sentences
    are independent given the document and may be translated concurrently.
    """
    window = model.config.context_window if window is None else window
    doc = ParallelDocument([(list(s), []) for s in source_sentences])

    def one(k: int) -> list[int]:
        context = extract_context(doc, k, window) if model.config.uses_context else None
        return translate_sentence(model, doc.sources[k - 1], context, cfg)

    ks = range(1, len(doc) + 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, ks))
    return [one(k) for k in ks]


def translate_documents(documents: Sequence[Sequence[Sequence[int]]], model: DocTransformer,
                        cfg: DecodeConfig = DecodeConfig(), window: Optional[int] = None,
                        threads: int = 1) -> list[list[list[int]]]:
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda d: translate_document(d, model, cfg, window), documents))
    return [translate_document(d, model, cfg, window) for d in documents]
