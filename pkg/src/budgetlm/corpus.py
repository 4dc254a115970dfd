"""Corpus ingestion: vocabularies, token streams and truncated-BPTT windows.

Word-level files follow the usual convention: whitespace tokens, one
`<eos>` appended per line, `<unk>` taken verbatim from the files.
Character-level files are raw bytes, one token per byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, IngestionError, LayoutError

EOS = "<eos>"
UNK = "<unk>"


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between ids 0..V-1 and tokens (strings or byte values)."""

    id_to_token: tuple
    unk_id: int | None = None
    eos_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "_token_to_id",
                           {tok: i for i, tok in enumerate(self.id_to_token)})
        if len(self._token_to_id) != len(self.id_to_token):
            raise IngestionError("vocabulary tokens are not distinct")
        if len(self.id_to_token) < 2:
            raise IngestionError("vocabulary needs at least 2 tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence, split: str, level: str) -> "TokenStream":
        ids = np.empty(len(tokens), dtype=np.int64)
        lut = self._token_to_id
        for k, tok in enumerate(tokens):
            i = lut.get(tok)
            if i is None:
                if self.unk_id is None:
                    raise ContractError(
                        f"token {tok!r} not in vocabulary and no unknown token is defined")
                i = self.unk_id
            ids[k] = i
        return TokenStream(ids=ids, level=level, split=split)


@dataclass
class TokenStream:
    """Encoded tokens of one split."""

    ids: np.ndarray
    level: str  # "word" | "char"
    split: str  # "train" | "valid" | "test"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)


def word_tokens(text: str) -> list[str]:
    """Whitespace tokens with one sentence-end marker per line."""
    tokens: list[str] = []
    for line in text.splitlines():
        tokens.extend(line.split())
        tokens.append(EOS)
    return tokens


def byte_tokens(data: bytes) -> list[int]:
    return list(data)


def build_vocab(tokens: Sequence, level: str) -> Vocabulary:
    """Assign ids by first appearance; word level recognizes <unk>/<eos>."""
    if len(tokens) == 0:
        raise IngestionError("cannot build a vocabulary from empty input")
    seen: dict = {}
    for tok in tokens:
        if tok not in seen:
            seen[tok] = len(seen)
    id_to_token = tuple(seen)
    unk_id = seen.get(UNK) if level == "word" else None
    eos_id = seen.get(EOS) if level == "word" else None
    return Vocabulary(id_to_token=id_to_token, unk_id=unk_id, eos_id=eos_id)


def split_char_corpus(stream: TokenStream) -> tuple[TokenStream, TokenStream, TokenStream]:
    """Split one character stream 90/5/5 with floored integer boundaries."""
    n = len(stream)
    if n < 10:
        raise IngestionError(f"character stream too short to split ({n} tokens, need >= 10)")
    b1 = math.floor(0.90 * n)
    b2 = math.floor(0.95 * n)
    mk = lambda lo, hi, split: TokenStream(ids=stream.ids[lo:hi], level=stream.level, split=split)
    return mk(0, b1, "train"), mk(b1, b2, "valid"), mk(b2, n, "test")


class WindowSequence:
    """Batched unroll windows over a stream.

    The stream is cut into `batch_size` contiguous equal-length segments
    (trailing remainder dropped); window k of each row covers positions
    [k*unroll, (k+1)*unroll) of its segment with targets shifted by one.
    With `include_partial` a shorter final window is emitted so that every
    target position of each segment is covered exactly once.
    """

    def __init__(self, ids: np.ndarray, batch_size: int, unroll: int,
                 include_partial: bool = False):
        ids = np.asarray(ids, dtype=np.int64)
        if batch_size < 1 or unroll < 1:
            raise LayoutError("batch_size and unroll must be positive")
        segment = len(ids) // batch_size
        min_segment = 2 if include_partial else unroll + 1
        if segment < min_segment:
            raise LayoutError(
                f"segment length {segment} (stream {len(ids)}, batch {batch_size}) "
                f"is below the minimum {min_segment} for unroll {unroll}")
        self.batch_size = batch_size
        self.unroll = unroll
        self.segment_length = segment
        self.stream_offsets = tuple(r * segment for r in range(batch_size))
        self._segments = ids[: batch_size * segment].reshape(batch_size, segment)
        full, rem = divmod(segment - 1, unroll)
        self._n_windows = full + (1 if include_partial and rem else 0)

    def __len__(self) -> int:
        return self._n_windows

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray, int]:
        if not 0 <= k < self._n_windows:
            raise IndexError(k)
        lo = k * self.unroll
        hi = min(lo + self.unroll, self.segment_length - 1)
        return self._segments[:, lo:hi], self._segments[:, lo + 1:hi + 1], k

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, int]]:
        for k in range(self._n_windows):
            yield self[k]


def make_windows(stream: TokenStream | np.ndarray, batch_size: int, unroll: int,
                 include_partial: bool = False) -> WindowSequence:
    ids = stream.ids if isinstance(stream, TokenStream) else stream
    return WindowSequence(ids, batch_size, unroll, include_partial=include_partial)


# ---------------------------------------------------------------------------
# file loading
# ---------------------------------------------------------------------------

@dataclass
class Corpus:
    vocab: Vocabulary
    level: str
    train: TokenStream
    valid: TokenStream | None
    test: TokenStream | None


def load_word_corpus(train_path: str | Path, valid_path: str | Path | None = None,
                     test_path: str | Path | None = None) -> Corpus:
    """Word-level corpus: vocabulary from the training file only."""
    def read_tokens(path) -> list[str]:
        text = Path(path).read_text(encoding="utf-8")
        toks = word_tokens(text)
        if not toks:
            raise IngestionError(f"no tokens in {path}")
        return toks

    train_toks = read_tokens(train_path)
    vocab = build_vocab(train_toks, "word")
    train = vocab.encode(train_toks, "train", "word")
    valid = vocab.encode(read_tokens(valid_path), "valid", "word") if valid_path else None
    test = vocab.encode(read_tokens(test_path), "test", "word") if test_path else None
    return Corpus(vocab=vocab, level="word", train=train, valid=valid, test=test)


def load_char_corpus(path: str | Path) -> Corpus:
    """Character-level corpus: one file, split 90/5/5 after encoding."""
    data = Path(path).read_bytes()
    if not data:
        raise IngestionError(f"empty file {path}")
    tokens = byte_tokens(data)
    vocab = build_vocab(tokens, "char")
    stream = vocab.encode(tokens, "train", "char")
    train, valid, test = split_char_corpus(stream)
    return Corpus(vocab=vocab, level="char", train=train, valid=valid, test=test)
