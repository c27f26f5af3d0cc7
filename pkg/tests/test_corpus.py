"""Unit tests for corpus ingestion, vocabulary and mapping mining."""

import numpy as np
import pytest

from segcvae import corpus
from segcvae.corpus import (BOS_ID, EOS_ID, PAD_ID, UNK_ID, DialoguePair,
                            Utterance, build_cdm_dataset, build_vocab,
                            encode_pair, extract_single_turn_pairs,
                            filter_by_vocab, mine_cdm, tokenize)
from segcvae.errors import DomainError, EmptyCorpus


def _pair(ctx: str, resp: str) -> DialoguePair:
    return DialoguePair(tuple(ctx.split()), tuple(resp.split()))


class TestTokenize:
    def test_punctuation_detached(self):
        assert tokenize("Move! What?") == ["move", "!", "what", "?"]

    def test_empty_text(self):
        assert tokenize("") == []

    def test_contraction_keeps_suffix(self):
        assert tokenize("I'm sorry") == ["i", "'m", "sorry"]

    def test_deterministic(self):
        text = "Well -- it's no use!"
        assert tokenize(text) == tokenize(text)


class TestSingleTurnPairs:
    def _dialogue(self, n):
        return [Utterance((f"u{i}",), "d0", i) for i in range(n)]

    def test_three_turns_two_pairs(self):
        d = self._dialogue(3)
        pairs = extract_single_turn_pairs(d)
        assert [(p.context, p.response) for p in pairs] == [
            (("u0",), ("u1",)), (("u1",), ("u2",))]

    def test_minimal_dialogue(self):
        assert len(extract_single_turn_pairs(self._dialogue(2))) == 1

    def test_degenerate_dialogue(self):
        assert extract_single_turn_pairs(self._dialogue(1)) == []

    def test_length_is_turns_minus_one(self):
        for n in range(2, 9):
            assert len(extract_single_turn_pairs(self._dialogue(n))) == n - 1


class TestReadCorpus:
    def test_blocks_and_turn_indices(self):
        text = "Hello there.\nHi!\n\nHow are you?\nFine.\nGood.\n"
        dialogues = corpus.read_corpus(text.splitlines())
        assert len(dialogues) == 2
        assert [u.turn_index for u in dialogues[1]] == [0, 1, 2]
        assert dialogues[0][1].tokens == ("hi", "!")

    def test_pair_file_roundtrip(self, tmp_path):
        pairs = [_pair("a b", "c"), _pair("d", "e f g")]
        path = tmp_path / "pairs.tsv"
        corpus.write_pairs(path, pairs)
        loaded = corpus.read_pairs(path)
        assert [(p.context, p.response) for p in loaded] == \
               [(p.context, p.response) for p in pairs]


class TestBuildVocab:
    def test_counts_specials_plus_content(self):
        pairs = [_pair("a b c", "d e"), _pair("a b", "c")]
        vocab = build_vocab(pairs, max_size=9, emb_dim=4)
        assert vocab.size == 9
        assert vocab.id_to_token[:4] == list(corpus.SPECIALS)

    def test_cap_at_specials(self):
        vocab = build_vocab([_pair("a", "b")], max_size=4, emb_dim=4)
        assert vocab.size == 4

    def test_lexicographic_tie_break(self):
        pairs = [_pair("a", "b"), _pair("b", "a")]  # both occur twice
        vocab = build_vocab(pairs, max_size=5, emb_dim=4)
        assert "a" in vocab and "b" not in vocab

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            build_vocab([], max_size=10, emb_dim=4)

    def test_max_size_below_specials(self):
        with pytest.raises(DomainError):
            build_vocab([_pair("a", "b")], max_size=3, emb_dim=4)

    def test_embedding_rows(self):
        source = {"a": np.ones(4)}
        vocab = build_vocab([_pair("a", "b")], max_size=8, emb_dim=4,
                            embedding_source=source)
        np.testing.assert_array_equal(vocab.embedding[vocab.id_of("a")], np.ones(4))
        np.testing.assert_array_equal(vocab.embedding[PAD_ID], np.zeros(4))
        b_row = vocab.embedding[vocab.id_of("b")]
        assert np.all(np.abs(b_row) <= 0.1) and np.any(b_row != 0)

    def test_seeded_rows_reproducible(self):
        pairs = [_pair("a b", "c d")]
        v1 = build_vocab(pairs, max_size=10, emb_dim=6, seed=5)
        v2 = build_vocab(pairs, max_size=10, emb_dim=6, seed=5)
        np.testing.assert_array_equal(v1.embedding, v2.embedding)

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocab([_pair("a b", "c")], max_size=8, emb_dim=4)
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        loaded = corpus.Vocabulary.load(path, vocab.embedding)
        assert loaded.token_to_id == vocab.token_to_id


class TestFilterByVocab:
    def _vocab(self, text):
        return build_vocab([_pair(text, text)], max_size=100, emb_dim=4)

    def test_oov_utterance_removed_everywhere(self):
        vocab = self._vocab("a c d")
        a, b, c, d = ("a",), ("zzz",), ("c",), ("d",)
        pairs = [DialoguePair(a, b), DialoguePair(a, c), DialoguePair(b, d)]
        kept = filter_by_vocab(pairs, vocab)
        assert kept == [DialoguePair(a, c)]

    def test_identity_when_all_in_vocab(self):
        vocab = self._vocab("a b c")
        pairs = [_pair("a b", "c"), _pair("c", "a")]
        assert filter_by_vocab(pairs, vocab) == pairs

    def test_everything_oov(self):
        vocab = self._vocab("a")
        assert filter_by_vocab([_pair("x", "y"), _pair("y", "z")], vocab) == []

    def test_idempotent(self):
        vocab = self._vocab("a b c")
        pairs = [_pair("a", "zzz"), _pair("a", "b"), _pair("zzz", "c")]
        once = filter_by_vocab(pairs, vocab)
        assert filter_by_vocab(once, vocab) == once


def _cdm_fixture():
    """10 pairs: one context with 3 distinct responses, one response under
    2 distinct contexts, 5 fillers with unique contexts and responses."""
    pairs = [
        _pair("hi", "r one"), _pair("hi", "r two"), _pair("hi", "r three"),
        _pair("c one", "ok"), _pair("c two", "ok"),
    ]
    pairs += [_pair(f"f{i} q", f"f{i} a") for i in range(5)]
    return pairs


class TestMineCdm:
    def test_fixture_fractions(self):
        report = mine_cdm(_cdm_fixture())
        assert report.o2m_pair_fraction == pytest.approx(0.3)
        assert report.m2o_pair_fraction == pytest.approx(0.2)
        assert report.cdm_fraction == pytest.approx(0.5)
        assert len(report.o2m_groups) == 1 and len(report.m2o_groups) == 1

    def test_unique_corpus_has_no_groups(self):
        report = mine_cdm([_pair(f"c{i}", f"r{i}") for i in range(6)])
        assert report.o2m_pair_fraction == 0.0
        assert report.m2o_pair_fraction == 0.0

    def test_empty_input(self):
        with pytest.raises(EmptyCorpus):
            mine_cdm([])

    def test_groups_partition_pairs(self):
        report = mine_cdm(_cdm_fixture())
        contexts = [key for key, _ in report.o2m_groups]
        responses = [key for key, _ in report.m2o_groups]
        assert len(contexts) == len(set(contexts))
        assert len(responses) == len(set(responses))
        assert 0.0 <= report.o2m_pair_fraction <= 1.0
        assert 0.0 <= report.m2o_pair_fraction <= 1.0

    def test_report_text_format(self):
        text = mine_cdm(_cdm_fixture()).text()
        assert "o2m_pair_fraction: 0.3" in text
        assert all(": " in line for line in text.strip().splitlines())


class TestBuildCdmDataset:
    def test_o2m_keeps_group_pairs(self):
        splits, manifest = build_cdm_dataset(_cdm_fixture(), "o2m")
        total = sum(len(s) for s in splits.values())
        assert total == 3
        assert manifest["groups"] == 1

    def test_m2o_without_repeats_errors(self):
        with pytest.raises(EmptyCorpus):
            build_cdm_dataset([_pair(f"c{i}", f"r{i}") for i in range(4)], "m2o")

    def test_avg_responses_per_context_at_least_two(self):
        splits, _ = build_cdm_dataset(_cdm_fixture(), "o2m")
        pairs = [p for s in splits.values() for p in s]
        contexts = {p.context for p in pairs}
        assert len(pairs) / len(contexts) >= 2.0

    def test_group_stays_in_one_split(self):
        pairs = _cdm_fixture() + [_pair("hi", "r four"), _pair("more", "ok")]
        splits, _ = build_cdm_dataset(pairs, "o2m")
        homes = {name for name, split in splits.items()
                 if any(p.context == ("hi",) for p in split)}
        assert len(homes) == 1

    def test_deterministic(self):
        a = build_cdm_dataset(_cdm_fixture(), "o2m")
        b = build_cdm_dataset(_cdm_fixture(), "o2m")
        assert a == b

    def test_bad_mode(self):
        with pytest.raises(DomainError):
            build_cdm_dataset(_cdm_fixture(), "both")


class TestEncodePair:
    @pytest.fixture
    def vocab(self):
        return build_vocab([_pair("a b c d e", "f g h")], max_size=20, emb_dim=4)

    def test_short_context_padded(self, vocab):
        ctx, _ = encode_pair(_pair("a b c", "f"), vocab, max_clen=25)
        assert ctx.shape == (25,)
        assert np.all(ctx[3:] == PAD_ID) and np.all(ctx[:3] != PAD_ID)

    def test_oov_becomes_unk(self, vocab):
        ctx, _ = encode_pair(_pair("a zzz", "f"), vocab, max_clen=5)
        assert ctx[1] == UNK_ID

    def test_long_context_truncated(self, vocab):
        long_ctx = " ".join(["a"] * 30)
        ctx, _ = encode_pair(_pair(long_ctx, "f"), vocab, max_clen=25)
        assert ctx.shape == (25,) and np.all(ctx != PAD_ID)

    def test_response_framing(self, vocab):
        _, resp = encode_pair(_pair("a", "f g"), vocab, max_clen=6)
        assert resp[0] == BOS_ID and resp[3] == EOS_ID
        assert np.all(resp[4:] == PAD_ID)
        assert resp.shape == (6,)

    def test_long_response_keeps_eos(self, vocab):
        _, resp = encode_pair(_pair("a", " ".join(["f"] * 30)), vocab, max_clen=10)
        assert resp.shape == (10,)
        assert resp[0] == BOS_ID and resp[-1] == EOS_ID

    def test_output_length_invariant(self, vocab):
        for clen in (2, 3, 7, 25):
            ctx, resp = encode_pair(_pair("a b c", "f g h"), vocab, clen)
            assert ctx.shape == (clen,) and resp.shape == (clen,)
