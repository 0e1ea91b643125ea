"""Masked-language-model masking, loss and backbone pretraining."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from ctm import tensor as T
from ctm.data import FormattedInput, format_input
from ctm.encoder import Backbone, collate
from ctm.errors import ConfigError
from ctm.optim import Adam
from ctm.rng import Rng
from ctm.tensor import Tensor
from ctm.tokenize import MASK, MASK_ID, SPECIAL_TOKENS, Vocab

log = logging.getLogger(__name__)


@dataclass
class MLMConfig:
    mask_rate: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)  # [MASK] / keep / random
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.mask_rate < 1.0:
            raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if any(s < 0 for s in self.mask_split) or abs(sum(self.mask_split) - 1.0) > 1e-9:
            raise ConfigError(f"mask_split must be non-negative and sum to 1, got {self.mask_split}")
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError("epochs >= 0, batch_size > 0 and learning_rate > 0 required")


@dataclass
class MaskedBatch:
    inputs: list[FormattedInput]
    rows: np.ndarray     # example index of each target
    positions: np.ndarray  # sequence position of each target
    targets: np.ndarray  # original token ids

    def __len__(self) -> int:
        return len(self.targets)


def _random_word_pool(vocab: Vocab) -> list[str]:
    return [t for t in vocab.tokens[len(SPECIAL_TOKENS):] if not t.startswith("##")]


def mask_batch(inputs: Sequence[FormattedInput], mask_rate: float, mask_split, rng: Rng,
               vocab: Vocab, kind: str) -> MaskedBatch:
    """Select title/entity positions at ``mask_rate`` and corrupt them 80/10/10.

    [CLS], [SEP] and the hypothesis slot are never selected.
    """
    p_mask, p_keep, _ = mask_split
    words = _random_word_pool(vocab) if kind == "char" else None
    out, rows, positions, targets = [], [], [], []
    for b, f in enumerate(inputs):
        cand = f.content_positions()
        chosen = cand[rng.random(len(cand)) < mask_rate] if len(cand) else cand
        if not len(chosen):
            out.append(f)
            continue
        tokens, ids = list(f.tokens), list(f.ids)
        for t in chosen:
            rows.append(b)
            positions.append(int(t))
            targets.append(f.ids[t])
            u = rng.random()
            if u < p_mask:
                tokens[t], ids[t] = MASK, MASK_ID
            elif u < p_mask + p_keep:
                pass
            elif kind == "wordpiece":
                j = int(rng.integers(len(SPECIAL_TOKENS), len(vocab)))
                tokens[t], ids[t] = vocab.tokens[j], j
            else:
                w = words[int(rng.integers(0, len(words)))]
                tokens[t], ids[t] = w, vocab.id(w)
        out.append(replace(f, tokens=tokens, ids=ids))
    return MaskedBatch(out, np.asarray(rows, dtype=np.int64), np.asarray(positions, dtype=np.int64),
                       np.asarray(targets, dtype=np.int64))


def mlm_loss(backbone: Backbone, masked: MaskedBatch, vocab_size: int,
             prompt_rows: Tensor | None = None, prompt_offsets=None) -> Tensor | None:
    """Mean cross-entropy at masked positions; ``None`` when nothing was masked."""
    if not len(masked):
        return None
    n_prompt = 0 if prompt_rows is None else prompt_rows.shape[0]
    batch = collate(masked.inputs, backbone.kind, vocab_size, prompt_offsets, n_prompt)
    states = backbone.forward(batch, prompt_rows)
    flat = masked.rows * batch.index.shape[1] + masked.positions
    return T.cross_entropy(backbone.mlm_logits(states, flat), masked.targets)


def batches(n: int, batch_size: int, rng: Rng | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain_inputs(titles: Sequence[str], vocab: Vocab, kind: str, max_seq: int) -> list[FormattedInput]:
    return [format_input(t, "", None, kind=kind, vocab=vocab, max_seq=max_seq) for t in titles]


def evaluate_mlm(backbone: Backbone, inputs: Sequence[FormattedInput], vocab: Vocab, cfg: MLMConfig,
                 rng: Rng, prompt_rows: Tensor | None = None, prompt_offsets=None) -> float:
    """Masked-token cross-entropy averaged over all targets, without recording a tape."""
    total, count = 0.0, 0
    with T.no_grad():
        for idx in batches(len(inputs), cfg.batch_size, None):
            mb = mask_batch([inputs[i] for i in idx], cfg.mask_rate, cfg.mask_split, rng, vocab, backbone.kind)
            loss = mlm_loss(backbone, mb, len(vocab), prompt_rows, prompt_offsets)
            if loss is not None:
                total += loss.item() * len(mb)
                count += len(mb)
    return total / count if count else 0.0


def pretrain_mlm(backbone: Backbone, titles: Sequence[str], vocab: Vocab, cfg: MLMConfig, rng: Rng,
                 frozen: bool = False) -> dict:
    """Train ``backbone`` with masked-token prediction over ``titles``.

    Returns a history with the pre-training loss estimate and one mean loss
    per epoch.
    """
    cfg.validate()
    if not titles:
        raise ConfigError("pretrain_mlm: empty corpus")
    inputs = pretrain_inputs(titles, vocab, backbone.kind, backbone.config.max_seq)
    init_loss = evaluate_mlm(backbone, inputs, vocab, cfg, rng.split("init-eval"))
    trainable = {k: v for k, v in backbone.params.items()}
    backbone.set_trainable(not frozen)
    opt = Adam(trainable, lr=cfg.learning_rate, frozen=trainable.keys() if frozen else ())
    history = {"init_loss": init_loss, "epoch_loss": []}
    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch-{epoch}")
        total, count = 0.0, 0
        for idx in batches(len(inputs), cfg.batch_size, erng):
            mb = mask_batch([inputs[i] for i in idx], cfg.mask_rate, cfg.mask_split, erng, vocab, backbone.kind)
            if frozen:
                with T.no_grad():
                    loss = mlm_loss(backbone, mb, len(vocab))
            else:
                loss = mlm_loss(backbone, mb, len(vocab))
            if loss is None:
                continue
            if not frozen:
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            total += loss.item() * len(mb)
            count += len(mb)
        history["epoch_loss"].append(total / max(count, 1))
        log.info("pretrain %s epoch %d loss %.4f", backbone.kind, epoch + 1, history["epoch_loss"][-1])
    backbone.set_trainable(False)
    return history


def expected_uniform_loss(vocab_size: int) -> float:
    return math.log(vocab_size)
