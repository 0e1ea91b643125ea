"""Labeled examples, entailment pairs and the [CLS] x [SEP] e h input layout."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ctm.errors import ContractError, DataError, LengthError, ParseError
from ctm.rng import Rng
from ctm.tokenize import CLS, PAD, SEP, Vocab, split_words, wordpiece

CLASSES = ("brand", "product", "feature")
ENTAILMENT, NON_ENTAILMENT = 0, 1

LABEL_HYPOTHESES = {
    "brand": "is a brand",
    "product": "is a product",
    "feature": "is a feature",
}
DICTIONARY_HYPOTHESES = {
    "brand": "is a brand, which is a type of things manufactured by a particular company",
    "product": "is a product, which is an article or substance manufactured or refined for sale",
    "feature": "is a feature, which is a distinctive attribute or a special aspect of something",
}
PROMPT_LENGTHS = {"labels": 3, "dictionary": 14}


def hypothesis_phrases(source: str) -> dict[str, str]:
    if source == "labels":
        return LABEL_HYPOTHESES
    if source == "dictionary":
        return DICTIONARY_HYPOTHESES
    raise ContractError(f"unknown hypothesis source {source!r}")


@dataclass(frozen=True)
class Example:
    title: str
    entity: str
    gold: str


@dataclass(frozen=True)
class PairedExample:
    title: str
    entity: str
    hypothesis_class: str
    label: int  # ENTAILMENT or NON_ENTAILMENT

    @property
    def entailed(self) -> bool:
        return self.label == ENTAILMENT


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str
    raw: str


def entity_span(title: str, entity: str) -> tuple[int, int] | None:
    """Whitespace-token span of ``entity`` inside ``title`` (first match), or None."""
    tt, et = title.split(), entity.split()
    if not et:
        return None
    for i in range(len(tt) - len(et) + 1):
        if tt[i:i + len(et)] == et:
            return i, i + len(et)
    return None


def validate(title: str, entity: str, gold: str) -> str | None:
    if gold not in CLASSES:
        return f"unknown entity type {gold!r}"
    if not title.strip():
        return "empty title"
    if entity_span(title, entity) is None:
        return f"entity {entity!r} is not a whole-token substring of the title"
    return None


def load_corpus(path: str | Path) -> tuple[list[Example], list[Reject]]:
    """Read ``entity_type<TAB>entity<TAB>title`` lines.

    A wrong column count is a hard parse error; content problems (unknown
    type, entity not found in the title) are collected as rejects.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from exc
    examples, rejects = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        cols = raw.split("\t")
        if len(cols) != 3:
            raise ParseError(f"{path.name}: expected 3 tab-separated columns, got {len(cols)}", lineno)
        gold, entity, title = (c.strip() for c in cols)
        reason = validate(title, entity, gold)
        if reason:
            rejects.append(Reject(lineno, reason, raw))
        else:
            examples.append(Example(title, entity, gold))
    return examples, rejects


def write_corpus(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for ex in examples:
            fh.write(f"{ex.gold}\t{ex.entity}\t{ex.title}\n")


def write_rejects(path: str | Path, rejects: Sequence[Reject]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["line", "reason"])
        for r in rejects:
            w.writerow([r.line, r.reason])


def make_pairs(ex: Example, rng: Rng) -> list[PairedExample]:
    negatives = [c for c in CLASSES if c != ex.gold]
    neg = negatives[int(rng.integers(0, len(negatives)))]
    return [
        PairedExample(ex.title, ex.entity, ex.gold, ENTAILMENT),
        PairedExample(ex.title, ex.entity, neg, NON_ENTAILMENT),
    ]


def build_pairs(examples: Sequence[Example], rng: Rng) -> list[PairedExample]:
    return [p for ex in examples for p in make_pairs(ex, rng)]


def build_novel_entity_set(train: Sequence[Example], test: Sequence[Example]) -> list[Example]:
    seen = {ex.entity.casefold() for ex in train}
    return [ex for ex in test if ex.entity.casefold() not in seen]


# ---------------------------------------------------------------- input layout


@dataclass
class FormattedInput:
    """One sequence laid out as [CLS] x [SEP] e h.

    ``tokens`` holds wordpieces (wordpiece front-end) or words (character
    front-end); ``ids`` are vocabulary ids of those tokens, used as MLM
    targets. Prompt-slot positions carry ``[PAD]`` placeholders and their
    embeddings are injected downstream.
    """

    tokens: list[str]
    ids: list[int]
    n: int
    m: int
    p: int
    prompt_slot: bool = False
    hypothesis_class: str | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sep_index(self) -> int:
        return self.n + 1

    @property
    def slot_start(self) -> int:
        return self.n + self.m + 2

    def content_positions(self) -> np.ndarray:
        """Title and entity positions: the only ones eligible for masking."""
        return np.concatenate([np.arange(1, self.n + 1), np.arange(self.n + 2, self.n + 2 + self.m)])


def split_tokens(text: str, kind: str, vocab: Vocab) -> list[str]:
    if kind == "wordpiece":
        return [p for w in split_words(text) for p in wordpiece(w, vocab)]
    if kind == "char":
        return split_words(text, lower=False)
    raise ContractError(f"unknown front-end kind {kind!r}")


def token_ids(tokens: Sequence[str], kind: str, vocab: Vocab) -> list[int]:
    if kind == "char":
        # word-level targets: specials keep their ids, words map case-folded
        return [vocab.id(t) if t in (CLS, SEP, PAD) else vocab.id(t.lower()) for t in tokens]
    return [vocab.id(t) for t in tokens]


def format_input(title: str, entity: str, hypothesis, *, kind: str, vocab: Vocab,
                 max_seq: int, hypothesis_class: str | None = None) -> FormattedInput:
    """Lay out ``[CLS] title [SEP] entity h``.

    ``hypothesis`` is ``None`` (no h, the entity-typing baseline input), a
    phrase string (hand-crafted literal tokens), or an int prompt length p
    (a slot of p placeholder positions).
    """
    x = split_tokens(title, kind, vocab)
    e = split_tokens(entity, kind, vocab)
    if hypothesis is None:
        h, slot = [], False
    elif isinstance(hypothesis, (int, np.integer)):
        h, slot = [PAD] * int(hypothesis), True
    else:
        h, slot = split_tokens(hypothesis, kind, vocab), False
    tokens = [CLS, *x, SEP, *e, *h]
    if len(tokens) > max_seq:
        raise LengthError(f"input for entity {entity!r} in {title!r} has {len(tokens)} tokens > max_seq {max_seq}")
    return FormattedInput(tokens, token_ids(tokens, kind, vocab), len(x), len(e), len(h), slot, hypothesis_class)
