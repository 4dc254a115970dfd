"""Vocabulary construction, corpus splitting and window layout."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetlm.corpus import (TokenStream, build_vocab, byte_tokens,
                             load_char_corpus, load_word_corpus, make_windows,
                             split_char_corpus, word_tokens)
from budgetlm.errors import ContractError, IngestionError, LayoutError


class TestVocabulary:
    def test_two_line_word_file(self):
        toks = word_tokens("a b\na")
        vocab = build_vocab(toks, "word")
        assert vocab.size == 3
        assert set(vocab.id_to_token) == {"a", "b", "<eos>"}

    def test_byte_level_two_distinct(self):
        vocab = build_vocab(byte_tokens(b"ab"), "char")
        assert vocab.size == 2

    def test_byte_level_205_distinct(self):
        # a corpus drawing on 205 distinct byte values yields V = 205
        distinct = bytes(range(205))
        data = distinct * 3 + b"abc"
        vocab = build_vocab(byte_tokens(data), "char")
        assert vocab.size == 205

    def test_ids_by_first_appearance(self):
        vocab = build_vocab(["c", "a", "c", "b"], "word")
        assert vocab.id_to_token[:3] == ("c", "a", "b")

    def test_empty_input_rejected(self):
        with pytest.raises(IngestionError):
            build_vocab([], "word")

    def test_unknown_token_without_unk_errors(self):
        vocab = build_vocab(["a", "b"], "word")
        with pytest.raises(ContractError, match="vocabulary"):
            vocab.encode(["a", "z"], "valid", "word")

    def test_unknown_token_maps_to_unk(self):
        vocab = build_vocab(["a", "<unk>", "b"], "word")
        stream = vocab.encode(["z"], "valid", "word")
        assert stream.ids[0] == vocab.unk_id


class TestCharSplit:
    def _stream(self, n):
        return TokenStream(ids=np.arange(n) % 200, level="char", split="train")

    def test_100_split(self):
        train, valid, test = split_char_corpus(self._stream(100))
        assert (len(train), len(valid), len(test)) == (90, 5, 5)

    def test_large_ratio_split(self):
        n = 1_000_000
        train, valid, test = split_char_corpus(self._stream(n))
        assert (len(train), len(valid), len(test)) == (900_000, 50_000, 50_000)

    def test_length_20_floor(self):
        train, valid, test = split_char_corpus(self._stream(20))
        assert (len(train), len(valid), len(test)) == (18, 1, 1)

    def test_too_short(self):
        with pytest.raises(IngestionError):
            split_char_corpus(self._stream(9))

    def test_splits_are_contiguous(self):
        stream = self._stream(41)
        train, valid, test = split_char_corpus(stream)
        joined = np.concatenate([train.ids, valid.ids, test.ids])
        np.testing.assert_array_equal(joined, stream.ids)


class TestWindows:
    def test_hand_enumerated_layout(self):
        ids = np.arange(1, 12)  # [1..11]
        windows = make_windows(ids, batch_size=2, unroll=2)
        assert windows.segment_length == 5
        inputs, targets, k = windows[0]
        assert k == 0
        np.testing.assert_array_equal(inputs, [[1, 2], [6, 7]])
        np.testing.assert_array_equal(targets, [[2, 3], [7, 8]])
        inputs, targets, _ = windows[1]
        np.testing.assert_array_equal(inputs, [[3, 4], [8, 9]])
        np.testing.assert_array_equal(targets, [[4, 5], [9, 10]])

    def test_single_window_covers_stream(self):
        ids = np.arange(10)
        windows = make_windows(ids, batch_size=1, unroll=9)
        assert len(windows) == 1
        inputs, targets, _ = windows[0]
        np.testing.assert_array_equal(inputs[0], ids[:-1])
        np.testing.assert_array_equal(targets[0], ids[1:])

    def test_segment_too_short(self):
        with pytest.raises(LayoutError):
            make_windows(np.arange(7), batch_size=2, unroll=3)

    def test_partial_final_window(self):
        ids = np.arange(12)
        windows = make_windows(ids, batch_size=1, unroll=5, include_partial=True)
        assert len(windows) == 3
        inputs, targets, _ = windows[2]
        assert inputs.shape == (1, 1)
        np.testing.assert_array_equal(inputs[0], [10])
        np.testing.assert_array_equal(targets[0], [11])

    @given(n=st.integers(20, 400), b=st.integers(1, 5), t=st.integers(1, 12))
    @settings(max_examples=60, deadline=None)
    def test_rows_reconstruct_segments(self, n, b, t):
        # concatenating a row's window inputs reproduces its segment minus
        # the final token; targets reproduce the segment minus the first
        ids = np.arange(n)
        segment = n // b
        if segment < 2:
            return
        windows = make_windows(ids, b, t, include_partial=True)
        for row in range(b):
            row_inputs = np.concatenate([w[0][row] for w in windows])
            row_targets = np.concatenate([w[1][row] for w in windows])
            seg = ids[row * segment:(row + 1) * segment]
            np.testing.assert_array_equal(row_inputs, seg[:-1])
            np.testing.assert_array_equal(row_targets, seg[1:])

    def test_eval_coverage_is_exact(self):
        ids = np.arange(103)
        windows = make_windows(ids, 1, 10, include_partial=True)
        targets = np.concatenate([w[1][0] for w in windows])
        np.testing.assert_array_equal(targets, ids[1:])


class TestFileLoading:
    def test_word_corpus(self, tmp_path):
        (tmp_path / "train.txt").write_text("the cat sat\nthe dog ran\n")
        (tmp_path / "valid.txt").write_text("the cat ran\n")
        corpus = load_word_corpus(tmp_path / "train.txt", tmp_path / "valid.txt")
        assert corpus.vocab.size == 6  # {the, cat, sat, dog, ran, <eos>}
        assert corpus.valid is not None
        assert corpus.test is None

    def test_char_corpus_autosplit(self, tmp_path):
        (tmp_path / "data.bin").write_bytes(bytes(range(50)) * 4)
        corpus = load_char_corpus(tmp_path / "data.bin")
        assert corpus.vocab.size == 50
        assert (len(corpus.train), len(corpus.valid), len(corpus.test)) == (180, 10, 10)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(IngestionError):
            load_char_corpus(path)
