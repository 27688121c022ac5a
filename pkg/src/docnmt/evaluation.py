"""BLEU scoring and a synthetic document-context disambiguation task."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .corpus import ParallelDocument
from .errors import ContractError

Sentence = Union[str, Sequence[str]]


@dataclass
class BleuReport:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int

    def line(self) -> str:
        """``score,p1,p2,p3,p4,bp`` with two decimals (precisions in percent)."""
        fields = [self.score] + [100.0 * p for p in self.precisions] + [self.brevity_penalty]
        return ",".join(f"{v:.2f}" for v in fields)


def _tokens(sentence: Sentence) -> list[str]:
    words = sentence.split() if isinstance(sentence, str) else list(sentence)
    return [w.lower() for w in words]


def _ngrams(words: list[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu(candidates: Sequence[Sentence], references: Sequence[Sentence],
         max_order: int = 4) -> BleuReport:
    """Corpus-level, case-insensitive BLEU with clipped counts and no smoothing."""
    if len(candidates) != len(references):
        raise ContractError(
            f"{len(candidates)} candidate lines but {len(references)} reference lines"
        )
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c, r = _tokens(cand), _tokens(ref)
        hyp_len += len(c)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            cn, rn = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum((cn & rn).values())
            totals[n - 1] += sum(cn.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


# ----------------------------------------------------------- synthetic task
@dataclass(frozen=True)
class SyntheticDocTask:
    """Documents whose ambiguous words are resolved only by earlier sentences.

    Each document has a hidden sense (0 or 1).  Trigger words of that sense
    appear in some sentences; an ambiguous word may appear in a later
    sentence only if a trigger occurs within the ``context_window``
    preceding sentences, and that sentence itself carries no trigger.  The
    ambiguous word's target form is the one for the document's sense.
    Filler words follow a Zipf law, so a small document corpus sees many of
    them only rarely.
    """

    seed: int = 0
    filler_words: int = 200
    ambiguous_words: int = 6
    triggers_per_sense: int = 4
    min_sentences: int = 3
    max_sentences: int = 6
    min_length: int = 3
    max_length: int = 7
    zipf_exponent: float = 1.0
    context_window: int = 2
    ambiguous_rate: float = 0.6
    trigger_rate: float = 0.6

    def filler(self, i: int) -> tuple[str, str]:
        return f"w{i}", f"W{i}"

    def ambiguous(self, i: int) -> str:
        return f"amb{i}"

    def sense_form(self, i: int, sense: int) -> str:
        return f"amb{i}{'ab'[sense]}"

    def trigger(self, sense: int, j: int) -> tuple[str, str]:
        return f"cue{'ab'[sense]}{j}", f"CUE{'AB'[sense]}{j}"

    @property
    def sense_pairs(self) -> dict[str, tuple[str, str]]:
        """Ambiguous source word -> (sense-0 form, sense-1 form)."""
        return {self.ambiguous(i): (self.sense_form(i, 0), self.sense_form(i, 1))
                for i in range(self.ambiguous_words)}

    def is_trigger(self, token: str) -> bool:
        return token.startswith("cue")


def generate_synthetic_corpus(task: SyntheticDocTask, documents: int,
                              stream: int = 0) -> list[ParallelDocument]:
    """Seed-deterministic documents; ``stream`` selects an independent split."""
    if documents < 1:
        raise ContractError("need at least one document")
    rng = np.random.default_rng([task.seed, stream])
    weights = 1.0 / np.arange(1, task.filler_words + 1) ** task.zipf_exponent
    weights /= weights.sum()
    senses = np.resize([0, 1], documents)
    rng.shuffle(senses)
    out = []
    for index in range(documents):
        sense = int(senses[index])
        k_total = int(rng.integers(task.min_sentences, task.max_sentences + 1))
        last_trigger = None
        sentences = []
        for k in range(1, k_total + 1):
            n = int(rng.integers(task.min_length, task.max_length + 1))
            pairs = [task.filler(int(i)) for i in rng.choice(task.filler_words, n, p=weights)]
            covered = last_trigger is not None and k - last_trigger <= task.context_window
            if k == 1:
                kind = "trigger"
            elif covered and rng.random() < task.ambiguous_rate:
                kind = "ambiguous"
            elif rng.random() < task.trigger_rate:
                kind = "trigger"
            else:
                kind = "plain"
            position = int(rng.integers(0, n + 1))
            if kind == "trigger":
                pairs.insert(position, task.trigger(sense, int(rng.integers(task.triggers_per_sense))))
                last_trigger = k
            elif kind == "ambiguous":
                word = int(rng.integers(task.ambiguous_words))
                pairs.insert(position, (task.ambiguous(word), task.sense_form(word, sense)))
            sentences.append(([s for s, _ in pairs], [t for _, t in pairs]))
        out.append(ParallelDocument(sentences, index))
    return out


def disambiguation_accuracy(translations: Sequence[Sequence[Sentence]],
                            documents: Sequence[ParallelDocument],
                            task: SyntheticDocTask) -> float:
    """Fraction of ambiguous words rendered in the context-correct sense.

    ``translations`` holds, per document, one hypothesis per sentence.  A
    word counts as correct when the hypothesis contains the reference's
    sense form and not the other one.  Returns NaN when no sentence is
    ambiguous.
    """
    if len(translations) != len(documents):
        raise ContractError("translations and documents are not aligned")
    pairs = task.sense_pairs
    correct = total = 0
    for hyps, doc in zip(translations, documents):
        if len(hyps) != len(doc):
            raise ContractError(f"document {doc.doc_id}: sentence counts differ")
        for hyp, (src, ref) in zip(hyps, doc.sentences):
            hyp_tokens = set(hyp.split() if isinstance(hyp, str) else hyp)
            for word in src:
                if word not in pairs:
                    continue
                forms = pairs[word]
                right = next((f for f in forms if f in ref), None)
                if right is None:
                    continue
                wrong = forms[1] if right == forms[0] else forms[0]
                total += 1
                correct += right in hyp_tokens and wrong not in hyp_tokens
    return correct / total if total else float("nan")
