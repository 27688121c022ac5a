import math
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docnmt.errors import ContractError
from docnmt.evaluation import (
    SyntheticDocTask,
    bleu,
    disambiguation_accuracy,
    generate_synthetic_corpus,
)

words = st.lists(st.sampled_from("a b c d e f".split()), min_size=1, max_size=10)


class TestBleu:
    def test_hand_computed(self):
        report = bleu(["a b c d e"], ["a b c d f"])
        assert report.precisions == [4 / 5, 3 / 4, 2 / 3, 1 / 2]
        assert report.brevity_penalty == 1.0
        assert report.score == pytest.approx(100 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25,
                                             rel=1e-12)

    def test_identity(self):
        assert bleu(["a b c d", "x y z w v"], ["a b c d", "x y z w v"]).score == pytest.approx(100.0)

    def test_zero_overlap(self):
        assert bleu(["a b c d"], ["e f g h"]).score == 0.0

    def test_case_folded(self):
        assert bleu(["A B C D"], ["a b c d"]).score == pytest.approx(100.0)

    def test_clipping(self):
        report = bleu(["the the the the"], ["the cat sat on"])
        assert report.precisions[0] == pytest.approx(1 / 4)

    def test_brevity_penalty(self):
        report = bleu(["a b c d"], ["a b c d e f g h"])
        assert report.brevity_penalty == pytest.approx(math.exp(1 - 8 / 4))

    def test_line_count_mismatch(self):
        with pytest.raises(ContractError):
            bleu(["a"], ["a", "b"])

    def test_report_line(self):
        line = bleu(["a b c d e"], ["a b c d f"]).line()
        fields = line.split(",")
        assert len(fields) == 6 and fields[1] == "80.00" and fields[-1] == "1.00"

    @settings(max_examples=40, deadline=None)
    @given(st.lists(words, min_size=4, max_size=6))
    def test_self_bleu_is_100_when_4grams_exist(self, lines):
        lines = [" ".join(l + ["x", "y", "z", "w"]) for l in lines]
        assert bleu(lines, lines).score == pytest.approx(100.0)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(words, words), min_size=1, max_size=5), st.randoms())
    def test_joint_reordering_invariant(self, pairs, rnd):
        cands, refs = [" ".join(c) for c, _ in pairs], [" ".join(r) for _, r in pairs]
        order = list(range(len(pairs)))
        rnd.shuffle(order)
        a = bleu(cands, refs).score
        b = bleu([cands[i] for i in order], [refs[i] for i in order]).score
        assert a == pytest.approx(b)
        assert 0.0 <= a <= 100.0 + 1e-9


class TestSyntheticCorpus:
    task = SyntheticDocTask(seed=3)

    def docs(self, n=60):
        return generate_synthetic_corpus(self.task, n, stream=1)

    def test_deterministic(self):
        assert [d.sentences for d in self.docs()] == [d.sentences for d in self.docs()]

    def test_streams_differ(self):
        other = generate_synthetic_corpus(self.task, 60, stream=2)
        assert [d.sentences for d in self.docs()] != [d.sentences for d in other]

    def test_first_sentence_never_ambiguous(self):
        pairs = self.task.sense_pairs
        assert all(not any(w in pairs for w in d.sources[0]) for d in self.docs())

    def test_trigger_within_window(self):
        pairs = self.task.sense_pairs
        for doc in self.docs():
            for k, src in enumerate(doc.sources):
                if any(w in pairs for w in src):
                    window = doc.sources[max(0, k - self.task.context_window):k]
                    assert any(self.task.is_trigger(w) for s in window for w in s)
                    assert not any(self.task.is_trigger(w) for w in src)

    def test_rendering_follows_trigger_sense(self):
        pairs = self.task.sense_pairs
        for doc in self.docs():
            sense = {w[3] for s in doc.sources for w in s if self.task.is_trigger(w)}
            assert len(sense) == 1
            index = "ab".index(sense.pop())
            for src, tgt in doc.sentences:
                for w in src:
                    if w in pairs:
                        assert pairs[w][index] in tgt

    def test_senses_balanced(self):
        pairs = self.task.sense_pairs
        counts = Counter()
        for doc in self.docs(400):
            for src, tgt in doc.sentences:
                for w in src:
                    if w in pairs:
                        counts[pairs[w].index(next(t for t in tgt if t in pairs[w]))] += 1
        total = counts[0] + counts[1]
        assert abs(counts[0] / total - 0.5) < 0.06

    def test_needs_documents(self):
        with pytest.raises(ContractError):
            generate_synthetic_corpus(self.task, 0)


class TestAccuracy:
    task = SyntheticDocTask(seed=4)
    docs = generate_synthetic_corpus(task, 30, stream=1)

    def test_oracle_is_perfect(self):
        refs = [d.targets for d in self.docs]
        assert disambiguation_accuracy(refs, self.docs, self.task) == 1.0

    def test_first_sense_is_chance(self):
        pairs = self.task.sense_pairs
        docs = generate_synthetic_corpus(self.task, 400, stream=2)
        hyps = [[[pairs[w][0] if w in pairs else w for w in src] for src in d.sources]
                for d in docs]
        assert disambiguation_accuracy(hyps, docs, self.task) == pytest.approx(0.5, abs=0.06)

    def test_both_forms_count_as_wrong(self):
        pairs = self.task.sense_pairs
        hyps = [[list(t) + [f for w in s if w in pairs for f in pairs[w]]
                 for s, t in d.sentences] for d in self.docs]
        assert disambiguation_accuracy(hyps, self.docs, self.task) == 0.0

    def test_no_ambiguous_words_is_nan(self):
        doc = generate_synthetic_corpus(SyntheticDocTask(ambiguous_rate=0.0), 3)
        assert math.isnan(disambiguation_accuracy([d.targets for d in doc], doc, self.task))

    def test_misaligned(self):
        with pytest.raises(ContractError):
            disambiguation_accuracy([], self.docs, self.task)
