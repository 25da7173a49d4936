"""
Unit tests for the target-phrase tokenizer.
"""
import logging

import numpy as np
import pytest

from targeted_detector.errors import DimensionError
from targeted_detector.tokenizer import ALL, CLS, PAD, SEP, UNK, Tokenizer, load_word_vectors


class TestVocabulary:
    """Vocabulary layout."""

    def test_special_tokens_first(self, tokenizer):
        """Special tokens take ids 0-4, words follow in sorted order."""
        assert tokenizer.vocab == [PAD, CLS, SEP, ALL, UNK, "circle", "square", "triangle"]
        assert tokenizer.vocab_size == 8

    def test_unknown_word_maps_to_unk(self, tokenizer):
        """Out-of-vocabulary words become [UNK]."""
        assert tokenizer.token_id("hexagon") == tokenizer.token_id(UNK)

    def test_case_insensitive(self, tokenizer):
        """Lookup lowercases words."""
        assert tokenizer.token_id("Circle") == tokenizer.token_id("circle")


class TestEncode:
    """Token, segment and padding layout of encoded target texts."""

    def test_two_phrases(self, tokenizer):
        """[CLS] p1 [SEP] p2 [SEP] then padding, segments numbered from 1."""
        seq = tokenizer.encode(["circle", "square"], k_max=6, max_phrases=3)
        assert seq.token_ids == (1, 5, 2, 6, 2, 0)
        assert seq.segment_ids == (0, 1, 1, 2, 2, 0)
        assert seq.pad_mask == (False, False, False, False, False, True)
        assert seq.n_phrases == 2
        assert seq.n_effective == 5

    def test_empty_text(self, tokenizer):
        """No phrases encodes to exactly [CLS], [SEP]."""
        seq = tokenizer.encode([], k_max=6, max_phrases=3)
        assert tokenizer.decode(seq.token_ids) == [CLS, SEP]
        assert seq.n_effective == 2
        assert seq.n_phrases == 0
        assert set(seq.segment_ids) == {0}

    def test_all_token(self, tokenizer):
        """[all] stays a single special token."""
        seq = tokenizer.encode([ALL], k_max=4, max_phrases=3)
        assert tokenizer.decode(seq.token_ids) == [CLS, ALL, SEP]

    def test_multi_word_phrase(self, tokenizer):
        """Every word of a phrase shares its segment."""
        seq = tokenizer.encode(["big circle"], k_max=5, max_phrases=3)
        assert seq.token_ids[:4] == (1, tokenizer.token_id(UNK), 5, 2)
        assert seq.segment_ids[:4] == (0, 1, 1, 1)

    def test_truncation_drops_whole_phrases(self, tokenizer, caplog):
        """A phrase that does not fit is dropped entirely and a warning is logged."""
        with caplog.at_level(logging.WARNING):
            seq = tokenizer.encode(["circle", "square", "triangle"], k_max=6, max_phrases=3)
        assert seq.n_phrases == 2
        assert tokenizer.decode(seq.token_ids) == [CLS, "circle", SEP, "square", SEP]
        assert "Truncated" in caplog.text

    def test_max_phrases_limit(self, tokenizer):
        """At most max_phrases phrases are kept."""
        seq = tokenizer.encode(["circle", "square", "triangle"], k_max=20, max_phrases=2)
        assert seq.n_phrases == 2

    def test_k_max_too_small(self, tokenizer):
        """k_max below 2 cannot hold [CLS] and [SEP]."""
        with pytest.raises(DimensionError):
            tokenizer.encode([], k_max=1, max_phrases=3)


class TestWordVectors:
    """Loading external word vectors."""

    def test_known_words_only(self, tokenizer, tmp_path):
        """Vectors for vocabulary words are returned by token id; others are skipped."""
        path = tmp_path / "vectors.txt"
        path.write_text("circle 1 2 3\nhexagon 4 5 6\nsquare 7 8\n")
        vectors = load_word_vectors(path, tokenizer, dim=3)
        assert list(vectors) == [tokenizer.token_id("circle")]
        np.testing.assert_array_equal(vectors[tokenizer.token_id("circle")], [1.0, 2.0, 3.0])
