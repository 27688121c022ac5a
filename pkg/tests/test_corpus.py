import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docnmt.corpus import (
    RESERVED,
    ParallelDocument,
    TrainingExample,
    Vocabulary,
    build_vocabulary,
    collate,
    extract_context,
    flatten_documents,
    load_document_corpus,
    make_batches,
    make_examples,
    write_corpus,
)
from docnmt.errors import ContractError, CorpusError
from docnmt.model import BOS_ID, EOS_ID, PAD_ID, UNK_ID, DocTransformer, ModelConfig
from docnmt.training import nll_loss

DOC = ParallelDocument([
    (["a1", "a2"], ["A1", "A2"]),
    (["b1"], ["B1"]),
    (["c1", "c2", "c3"], ["C1", "C2", "C3"]),
    (["d1"], ["D1"]),
])


class TestVocabulary:
    def test_frequency_order(self):
        v = build_vocabulary([["a", "a", "b"]], max_size=5)
        assert (v.id("a"), v.id("b")) == (4, 5)

    def test_lexicographic_tie_break(self):
        v = build_vocabulary([["y", "x"]], max_size=1)
        assert "x" in v and "y" not in v

    def test_unknown_maps_to_unk(self):
        assert Vocabulary(["a"]).encode(["zzz"]) == [UNK_ID]

    def test_reserved_ids(self):
        v = Vocabulary()
        assert [v.id(t) for t in RESERVED] == [PAD_ID, BOS_ID, EOS_ID, UNK_ID]

    def test_duplicate_rejected(self):
        with pytest.raises(CorpusError):
            Vocabulary(["a", "a"])

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=12))
    def test_round_trip_with_unk(self, sentence):
        vocab = Vocabulary(["a", "b", "c"])
        decoded = vocab.decode(vocab.encode(sentence))
        assert decoded == [t if t in vocab else "<unk>" for t in sentence]

    def test_decode_strips_markers(self):
        v = Vocabulary(["a"])
        assert v.decode([BOS_ID, 4, EOS_ID, 4]) == ["a"]
        assert v.decode([BOS_ID, 4], strip=False) == ["<s>", "a"]

    def test_save_load(self, tmp_path):
        v = Vocabulary(["x", "y"])
        v.save(tmp_path / "v.txt")
        assert (tmp_path / "v.txt").read_text() == "x\ny\n"
        assert Vocabulary.load(tmp_path / "v.txt") == v


class TestLoad:
    def test_two_documents(self, tmp_path):
        (tmp_path / "s").write_text("a b\n\nc d\n")
        (tmp_path / "t").write_text("A B\n\nC D\n")
        docs = load_document_corpus(tmp_path / "s", tmp_path / "t")
        assert [len(d) for d in docs] == [1, 1]
        assert docs[1].sentences == [(["c", "d"], ["C", "D"])]

    def test_sentence_count_mismatch_names_document(self, tmp_path):
        (tmp_path / "s").write_text("a\n\nb\nc\n")
        (tmp_path / "t").write_text("A\n\nB\n")
        with pytest.raises(CorpusError, match="document 1.*lines 3-4"):
            load_document_corpus(tmp_path / "s", tmp_path / "t")

    def test_document_count_mismatch(self, tmp_path):
        (tmp_path / "s").write_text("a\n\nb\n")
        (tmp_path / "t").write_text("A\n")
        with pytest.raises(CorpusError):
            load_document_corpus(tmp_path / "s", tmp_path / "t")

    def test_empty_files(self, tmp_path):
        (tmp_path / "s").write_text("")
        (tmp_path / "t").write_text("")
        assert load_document_corpus(tmp_path / "s", tmp_path / "t") == []

    def test_write_round_trip(self, tmp_path):
        write_corpus(tmp_path / "s", tmp_path / "t", [DOC, DOC])
        docs = load_document_corpus(tmp_path / "s", tmp_path / "t")
        assert [d.sentences for d in docs] == [DOC.sentences, DOC.sentences]


class TestExtractContext:
    @pytest.mark.parametrize("window", [0, 1, 2, 5])
    def test_first_sentence_is_bos(self, window):
        assert extract_context(DOC, 1, window) == ["<s>"]

    def test_first_sentence_is_bos_id_for_encoded(self):
        doc = ParallelDocument([([5, 6], [7])])
        assert extract_context(doc, 1, 2) == [BOS_ID]

    def test_window_two_takes_two_preceding(self):
        assert extract_context(DOC, 4, 2) == ["b1", "c1", "c2", "c3"]

    def test_fewer_sentences_than_window(self):
        assert extract_context(DOC, 2, 2) == ["a1", "a2"]

    def test_zero_window(self):
        assert extract_context(DOC, 3, 0) == ["<s>"]

    @pytest.mark.parametrize("k", [0, 5])
    def test_out_of_range(self, k):
        with pytest.raises(ContractError):
            extract_context(DOC, k, 2)

    @pytest.mark.parametrize("k", [1, 2, 3, 4])
    @pytest.mark.parametrize("window", [1, 2, 3])
    def test_length_is_sum_of_window(self, k, window):
        lengths = [len(s) for s in DOC.sources[max(0, k - 1 - window):k - 1]]
        assert len(extract_context(DOC, k, window)) == (sum(lengths) if k > 1 else 1)


def vocabs():
    return (Vocabulary(sorted({t for s in DOC.sources for t in s})),
            Vocabulary(sorted({t for s in DOC.targets for t in s})))


def test_make_examples_layout():
    sv, tv = vocabs()
    ex = make_examples([DOC], sv, tv, window=2)
    assert len(ex) == 4
    assert ex[0].context == [BOS_ID]
    assert ex[3].context == sv.encode(["b1", "c1", "c2", "c3"])
    assert ex[1].source == sv.encode(["b1"]) + [EOS_ID]
    assert ex[1].target == [BOS_ID] + tv.encode(["B1"]) + [EOS_ID]


def test_flatten_documents():
    flat = flatten_documents([DOC])
    assert len(flat) == 4 and all(len(d) == 1 for d in flat)


def test_training_example_contracts():
    with pytest.raises(ContractError):
        TrainingExample([], [4, 2], [1, 2])
    with pytest.raises(ContractError):
        TrainingExample([1], [4, 2], [1])


class TestBatching:
    def examples(self):
        sv, tv = vocabs()
        return make_examples([DOC, DOC], sv, tv, window=2)

    def test_singleton(self):
        e = self.examples()[2]
        (batch,) = make_batches([e], 100)
        assert len(batch) == 1 and not batch.source_padding.any()

    def test_equal_lengths_share_batch(self):
        e = self.examples()[1]
        (batch,) = make_batches([e, e], 100)
        assert len(batch) == 2

    def test_budget_respected_and_every_example_kept(self):
        ex = self.examples()
        batches = make_batches(ex, 12)
        assert sum(len(b) for b in batches) == len(ex)
        assert all(b.padded_tokens <= 12 for b in batches)

    def test_too_large_example(self):
        with pytest.raises(ContractError):
            make_batches(self.examples(), 5)

    def test_deterministic(self):
        a, b = make_batches(self.examples(), 20), make_batches(self.examples(), 20)
        assert all(np.array_equal(x.source, y.source) and np.array_equal(x.context, y.context)
                   for x, y in zip(a, b))

    def test_masks(self):
        batch = collate(self.examples()[:3])
        assert np.array_equal(batch.source_padding, batch.source == PAD_ID)
        assert batch.target_tokens == sum(len(e.target) - 1 for e in self.examples()[:3])

    @pytest.mark.parametrize("doc_mode", [False, True])
    def test_padding_neutral_loss(self, doc_mode):
        sv, tv = vocabs()
        cfg = ModelConfig(source_vocab_size=len(sv), target_vocab_size=len(tv), hidden_size=8,
                          filter_size=16, num_heads=2, encoder_layers=1, decoder_layers=1,
                          integrate_encoder=doc_mode, integrate_decoder=doc_mode,
                          dropout=0.0, precision=64)
        model = DocTransformer(cfg, 0)
        ex = self.examples()
        batched = nll_loss(collate(ex), model, "sum").item()
        single = sum(nll_loss(collate([e]), model, "sum").item() for e in ex)
        assert batched == pytest.approx(single, abs=1e-6)
