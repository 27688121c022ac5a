"""Document-parallel corpora, vocabularies, context extraction and batching.

Corpus file format: UTF-8 text, one whitespace-tokenised sentence per line,
a blank line between documents.  Source and target files are aligned
document by document and line by line.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, CorpusError
from .model import BOS_ID, EOS_ID, PAD_ID, UNK_ID

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    """Token/id bijection with PAD=0, BOS=1, EOS=2, UNK=3 reserved."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._itos = list(RESERVED)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for token in tokens:
            if token in self._stoi:
                raise CorpusError(f"duplicate vocabulary entry {token!r}")
            self._stoi[token] = len(self._itos)
            self._itos.append(token)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        """Non-reserved entries in id order."""
        return self._itos[len(RESERVED):]

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, index: int) -> str:
        return self._itos[index]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD_ID, BOS_ID):
                continue
            if strip and i == EOS_ID:
                break
            out.append(self._itos[i])
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


def build_vocabulary(sentences: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Keep the ``max_size`` most frequent tokens (ties broken lexicographically).

    ``max_size`` counts only non-reserved entries.
    """
    counts = Counter(t for s in sentences for t in s if t not in RESERVED)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([t for t, _ in ranked[:max(max_size, 0)]])


@dataclass
class ParallelDocument:
    """Aligned (source, target) sentences; tokens may be strings or ids."""

    sentences: list[tuple[list, list]]
    doc_id: int = 0

    def __post_init__(self):
        if not self.sentences:
            raise CorpusError(f"document {self.doc_id} has no sentences")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def sources(self) -> list[list]:
        return [s for s, _ in self.sentences]

    @property
    def targets(self) -> list[list]:
        return [t for _, t in self.sentences]


def _read_documents(path) -> list[list[tuple[int, list[str]]]]:
    docs, current = [], []
    try:
        handle = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError(f"corpus file {path} does not exist") from None
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if line.strip():
                current.append((lineno, line.split()))
            elif current:
                docs.append(current)
                current = []
    if current:
        docs.append(current)
    return docs


def load_document_corpus(source_path, target_path) -> list[ParallelDocument]:
    src_docs, tgt_docs = _read_documents(source_path), _read_documents(target_path)
    if len(src_docs) != len(tgt_docs):
        raise CorpusError(
            f"{source_path} has {len(src_docs)} documents but {target_path} has {len(tgt_docs)}"
        )
    documents = []
    for index, (src, tgt) in enumerate(zip(src_docs, tgt_docs)):
        if len(src) != len(tgt):
            raise CorpusError(
                f"document {index} has {len(src)} source sentences (lines {src[0][0]}-"
                f"{src[-1][0]}) but {len(tgt)} target sentences (lines {tgt[0][0]}-{tgt[-1][0]})"
            )
        documents.append(ParallelDocument([(s, t) for (_, s), (_, t) in zip(src, tgt)], index))
    return documents


def write_documents(path, documents: Sequence[Sequence[Sequence[str]]]) -> None:
    """Write documents (lists of token lists) in corpus format."""
    blocks = ["\n".join(" ".join(s) for s in doc) for doc in documents]
    Path(path).write_text("\n\n".join(blocks) + ("\n" if blocks else ""), encoding="utf-8")


def write_corpus(source_path, target_path, documents: Sequence[ParallelDocument]) -> None:
    write_documents(source_path, [d.sources for d in documents])
    write_documents(target_path, [d.targets for d in documents])


def extract_context(doc: ParallelDocument, k: int, window: int) -> list:
    """Source tokens of the ``window`` sentences preceding sentence ``k`` (1-based).

    Sentences are concatenated in document order.  When nothing precedes
    (``k == 1`` or ``window == 0``) the context is a single BOS token.
    """
    if not 1 <= k <= len(doc):
        raise ContractError(f"sentence index {k} outside 1..{len(doc)}")
    start = max(1, k - window)
    tokens = [t for s in doc.sources[start - 1:k - 1] for t in s]
    if tokens:
        return tokens
    first = next((t for s in doc.sources for t in s), BOS_ID)
    return [RESERVED[BOS_ID]] if isinstance(first, str) else [BOS_ID]


@dataclass
class TrainingExample:
    context: list[int]
    source: list[int]
    target: list[int]

    def __post_init__(self):
        if not self.context:
            raise ContractError("context must be nonempty")
        if len(self.target) < 2:
            raise ContractError("target must hold BOS and EOS")


def encode_document(doc: ParallelDocument, source_vocab: Vocabulary,
                    target_vocab: Vocabulary) -> ParallelDocument:
    return ParallelDocument(
        [(source_vocab.encode(s), target_vocab.encode(t)) for s, t in doc.sentences],
        doc.doc_id,
    )


def make_examples(documents: Sequence[ParallelDocument], source_vocab: Vocabulary,
                  target_vocab: Vocabulary, window: int) -> list[TrainingExample]:
    """One example per sentence with its preceding-sentence context."""
    examples = []
    for doc in documents:
        ids = encode_document(doc, source_vocab, target_vocab)
        for k, (src, tgt) in enumerate(ids.sentences, start=1):
            examples.append(TrainingExample(
                context=list(extract_context(ids, k, window)),
                source=list(src) + [EOS_ID],
                target=[BOS_ID] + list(tgt) + [EOS_ID],
            ))
    return examples


def flatten_documents(documents: Sequence[ParallelDocument]) -> list[ParallelDocument]:
    """Turn every sentence pair into its own single-sentence document."""
    flat = []
    for doc in documents:
        for pair in doc.sentences:
            flat.append(ParallelDocument([pair], len(flat)))
    return flat


@dataclass
class Batch:
    """Padded arrays for a group of examples (PAD id 0; masks True at padding)."""

    source: np.ndarray
    target_in: np.ndarray
    target_out: np.ndarray
    context: np.ndarray
    source_padding: np.ndarray = field(init=False)
    target_padding: np.ndarray = field(init=False)
    context_padding: np.ndarray = field(init=False)

    def __post_init__(self):
        self.source_padding = self.source == PAD_ID
        self.target_padding = self.target_out == PAD_ID
        self.context_padding = self.context == PAD_ID

    def __len__(self) -> int:
        return self.source.shape[0]

    @property
    def target_tokens(self) -> int:
        return int((~self.target_padding).sum())

    @property
    def source_tokens(self) -> int:
        return int((~self.source_padding).sum())

    @property
    def padded_tokens(self) -> int:
        return len(self) * (self.source.shape[1] + self.target_in.shape[1])


def _pad(rows: Sequence[Sequence[int]]) -> np.ndarray:
    out = np.full((len(rows), max(len(r) for r in rows)), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def collate(examples: Sequence[TrainingExample]) -> Batch:
    return Batch(
        source=_pad([e.source for e in examples]),
        target_in=_pad([e.target[:-1] for e in examples]),
        target_out=_pad([e.target[1:] for e in examples]),
        context=_pad([e.context for e in examples]),
    )


def _cost(e: TrainingExample) -> int:
    return len(e.source) + len(e.target) - 1


def make_batches(examples: Sequence[TrainingExample], token_budget: int) -> list[Batch]:
    """Length-sorted greedy packing under a padded-token budget.

    The padded size of a batch counts source plus decoder-input positions
    (context positions are excluded so sentence- and document-mode batches
    have identical composition).  Output order is deterministic.
    """
    if not examples:
        return []
    too_big = [i for i, e in enumerate(examples) if _cost(e) > token_budget]
    if too_big:
        raise ContractError(
            f"example {too_big[0]} needs {_cost(examples[too_big[0]])} tokens, "
            f"budget is {token_budget}"
        )
    order = sorted(range(len(examples)),
                   key=lambda i: (len(examples[i].target), len(examples[i].source), i))
    batches, group, src_max, tgt_max = [], [], 0, 0
    for i in order:
        e = examples[i]
        s, t = max(src_max, len(e.source)), max(tgt_max, len(e.target) - 1)
        if group and (len(group) + 1) * (s + t) > token_budget:
            batches.append(collate(group))
            group, s, t = [], len(e.source), len(e.target) - 1
        group.append(e)
        src_max, tgt_max = s, t
    batches.append(collate(group))
    return batches


def encode_sentences(sentences: Sequence[Sequence[str]], vocab: Vocabulary) -> list[list[int]]:
    return [vocab.encode(s) for s in sentences]


def documents_sources(documents: Sequence[ParallelDocument]) -> list[list]:
    return [s for d in documents for s in d.sources]


def documents_targets(documents: Sequence[ParallelDocument]) -> list[list]:
    return [t for d in documents for t in d.targets]


def vocabularies_for(documents: Sequence[ParallelDocument], max_size: int = 100_000,
                     extra: Optional[Sequence[ParallelDocument]] = None
                     ) -> tuple[Vocabulary, Vocabulary]:
    docs = list(documents) + list(extra or [])
    return (build_vocabulary(documents_sources(docs), max_size),
            build_vocabulary(documents_targets(docs), max_size))
