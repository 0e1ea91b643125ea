"""Wordpiece vocabulary/tokenizer and fixed-width character rows."""

from __future__ import annotations

import unicodedata
from collections import Counter
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from ctm.errors import ConfigError, DataError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)

MAX_WORD_CHARS = 100


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def split_words(text: str, lower: bool = True) -> list[str]:
    """Whitespace split with punctuation broken out as standalone words."""
    if lower:
        text = text.lower()
    words: list[str] = []
    for chunk in text.split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            else:
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


def normalize(text: str) -> str:
    return " ".join(split_words(text))


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(tokens)
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise DataError(f"vocab must start with {SPECIAL_TOKENS}")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1])


def build_vocab(corpus: list[str], max_size: int, min_freq: int = 1,
                reserved_words: Iterable[str] = ()) -> Vocab:
    """Frequency-based wordpiece inventory.

    Layout: special tokens, every seen character both as a word-initial and a
    ``##`` continuation piece, ``reserved_words``, then whole words by
    frequency, then ``##`` suffix pieces (length 2-4) counted over words left
    out. Ties break lexicographically.
    """
    if not corpus:
        raise ConfigError("build_vocab: empty corpus")
    reserved_words = list(reserved_words)
    counts: Counter[str] = Counter()
    for line in corpus:
        counts.update(split_words(line))
    for line in reserved_words:
        counts.update({w: 0 for w in split_words(line)})
    alphabet = sorted({ch for w in counts for ch in w})
    tokens = list(SPECIAL_TOKENS)
    tokens += alphabet + ["##" + ch for ch in alphabet]
    if max_size < len(tokens):
        raise ConfigError(f"max_size {max_size} < {len(tokens)} reserved + alphabet pieces")
    seen = set(tokens)

    def push(tok: str) -> bool:
        if len(tokens) >= max_size:
            return False
        if tok not in seen:
            seen.add(tok)
            tokens.append(tok)
        return True

    for line in reserved_words:
        for w in split_words(line):
            push(w)
    frequent = sorted((w for w, c in counts.items() if c >= min_freq and len(w) > 1),
                      key=lambda w: (-counts[w], w))
    for w in frequent:
        if not push(w):
            break
    suffixes: Counter[str] = Counter()
    for w, c in counts.items():
        if w in seen or c < min_freq:
            continue
        for k in range(2, 5):
            if len(w) > k:
                suffixes["##" + w[-k:]] += c
    for piece in sorted(suffixes, key=lambda p: (-suffixes[p], p)):
        if suffixes[piece] < min_freq or not push(piece):
            break
    return Vocab(tokens)


class Encoding(NamedTuple):
    ids: list[int]
    pieces: list[str]


def wordpiece(word: str, vocab: Vocab) -> list[str]:
    if len(word) > MAX_WORD_CHARS:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        cur = None
        while start < end:
            sub = word[start:end] if start == 0 else "##" + word[start:end]
            if sub in vocab:
                cur = sub
                break
            end -= 1
        if cur is None:
            return [UNK]
        pieces.append(cur)
        start = end
    return pieces


def tokenize_wordpiece(text: str, vocab: Vocab) -> Encoding:
    pieces = [p for w in split_words(text) for p in wordpiece(w, vocab)]
    return Encoding([vocab.id(p) for p in pieces], pieces)


def detokenize(pieces: list[str]) -> str:
    out: list[str] = []
    for p in pieces:
        if p.startswith("##") and out:
            out[-1] += p[2:]
        else:
            out.append(p)
    return " ".join(out)


# ---------------------------------------------------------------- characters

CHAR_ROW_LEN = 50
MAX_INTERIOR_CHARS = 47
CHAR_PAD, CHAR_BOW, CHAR_EOW, CHAR_UNK = 0, 1, 2, 3
_FIRST_PRINTABLE, _LAST_PRINTABLE = 32, 126
CHAR_ALPHABET_SIZE = 4 + (_LAST_PRINTABLE - _FIRST_PRINTABLE + 1)


def char_id(ch: str) -> int:
    cp = ord(ch)
    if _FIRST_PRINTABLE <= cp <= _LAST_PRINTABLE:
        return 4 + cp - _FIRST_PRINTABLE
    return CHAR_UNK


def encode_chars(token: str) -> np.ndarray:
    """[BOW, up to 47 chars, EOW, 0...]: always 50 ids."""
    if not token:
        raise DataError("encode_chars: empty token")
    interior = [char_id(c) for c in token[:MAX_INTERIOR_CHARS]]
    row = np.zeros(CHAR_ROW_LEN, dtype=np.int64)
    row[0] = CHAR_BOW
    row[1:1 + len(interior)] = interior
    row[1 + len(interior)] = CHAR_EOW
    return row
