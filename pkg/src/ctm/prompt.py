"""Continuous hypothesis prompts tuned by masked-token prediction on a frozen backbone."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence


from ctm import tensor as T
from ctm.checkpoint import load_arrays, save_arrays
from ctm.data import CLASSES, PROMPT_LENGTHS, Example, format_input, hypothesis_phrases, split_tokens, token_ids
from ctm.encoder import Backbone
from ctm.errors import ConfigError, ContractError, InvariantError
from ctm.mlm import MLMConfig, batches, evaluate_mlm, mask_batch, mlm_loss
from ctm.optim import Adam, checksum
from ctm.rng import Rng
from ctm.tensor import Tensor
from ctm.tokenize import PAD, Vocab

log = logging.getLogger(__name__)


@dataclass
class TuneConfig(MLMConfig):
    learning_rate: float = 5e-3
    epochs: int = 10


@dataclass
class PromptMatrix:
    label: str
    backbone: str  # "wordpiece" or "char"
    init_kind: str  # "labels" or "dictionary"
    H: Tensor

    @property
    def p(self) -> int:
        return self.H.shape[0]

    @property
    def d(self) -> int:
        return self.H.shape[1]

    def copy(self, requires_grad: bool = False) -> "PromptMatrix":
        return PromptMatrix(self.label, self.backbone, self.init_kind,
                            Tensor(self.H.data.copy(), requires_grad=requires_grad))

    def save(self, path: str | Path) -> None:
        save_arrays(path, {"H": self.H.data}, {
            "class": self.label, "backbone": self.backbone, "init_kind": self.init_kind,
            "p": self.p, "d": self.d,
        })

    @classmethod
    def load(cls, path: str | Path) -> "PromptMatrix":
        arrays, meta = load_arrays(path)
        H = arrays["H"]
        if H.shape != (meta["p"], meta["d"]):
            raise ContractError(f"{path}: H shape {H.shape} disagrees with header p={meta['p']}, d={meta['d']}")
        return cls(meta["class"], meta["backbone"], meta["init_kind"], Tensor(H))


def init_prompt(init_kind: str, label: str, backbone: Backbone, vocab: Vocab) -> PromptMatrix:
    """Rows = the backbone's input embeddings of the hand-written hypothesis phrase.

    The phrase is cut or [PAD]-filled to 3 (labels) or 14 (dictionary) tokens.
    """
    if label not in CLASSES:
        raise ContractError(f"unknown class {label!r}")
    if init_kind not in PROMPT_LENGTHS:
        raise ContractError(f"unknown prompt initialisation {init_kind!r}")
    p = PROMPT_LENGTHS[init_kind]
    tokens = split_tokens(hypothesis_phrases(init_kind)[label], backbone.kind, vocab)[:p]
    tokens += [PAD] * (p - len(tokens))
    ids = [vocab.id(t) for t in tokens] if backbone.kind == "wordpiece" else token_ids(tokens, "char", vocab)
    with T.no_grad():
        rows = backbone.token_rows(tokens, ids)
    return PromptMatrix(label, backbone.kind, init_kind, Tensor(rows.data.copy()))


def prompt_inputs(examples: Sequence[Example], prompt: PromptMatrix, backbone: Backbone, vocab: Vocab):
    return [format_input(ex.title, ex.entity, prompt.p, kind=backbone.kind, vocab=vocab,
                         max_seq=backbone.config.max_seq, hypothesis_class=prompt.label)
            for ex in examples]


def prompt_mlm_loss(backbone: Backbone, examples: Sequence[Example], prompt: PromptMatrix, vocab: Vocab,
                    cfg: MLMConfig, rng: Rng) -> float:
    """Held-out style MLM loss of ``examples`` with ``prompt`` in the hypothesis slot."""
    inputs = prompt_inputs(examples, prompt, backbone, vocab)
    return evaluate_mlm(backbone, inputs, vocab, cfg, rng, prompt.H, {prompt.label: 0})


def tune_prompt(backbone: Backbone, class_examples: Sequence[Example], prompt: PromptMatrix,
                vocab: Vocab, cfg: TuneConfig, rng: Rng) -> tuple[PromptMatrix, dict]:
    """Optimise the prompt rows only; the backbone is frozen and checked bit-for-bit."""
    cfg.validate()
    if not class_examples:
        raise ConfigError(f"no training examples for class {prompt.label!r}")
    if prompt.backbone != backbone.kind or prompt.d != backbone.config.d:
        raise ContractError("prompt and backbone disagree on front-end kind or width")
    backbone.set_trainable(False)
    before = checksum(backbone.params)
    tuned = prompt.copy(requires_grad=True)
    inputs = prompt_inputs(class_examples, tuned, backbone, vocab)
    opt = Adam({"H": tuned.H}, lr=cfg.learning_rate)
    offsets = {tuned.label: 0}
    history = {"epoch_loss": []}
    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch-{epoch}")
        total, count = 0.0, 0
        for idx in batches(len(inputs), cfg.batch_size, erng):
            mb = mask_batch([inputs[i] for i in idx], cfg.mask_rate, cfg.mask_split, erng, vocab, backbone.kind)
            loss = mlm_loss(backbone, mb, len(vocab), tuned.H, offsets)
            if loss is None:
                continue
            opt.zero_grad()
            T.backward(loss)
            leaked = [k for k, t in backbone.params.items() if t.grad is not None]
            if leaked:
                raise InvariantError(f"gradient reached frozen backbone parameters {leaked[:5]}")
            opt.step()
            total += loss.item() * len(mb)
            count += len(mb)
        history["epoch_loss"].append(total / max(count, 1))
        log.info("prompt %s/%s/%s epoch %d loss %.4f", backbone.kind, prompt.init_kind, prompt.label,
                 epoch + 1, history["epoch_loss"][-1])
    if checksum(backbone.params) != before:
        raise InvariantError("backbone parameters changed during prompt tuning")
    tuned.H.requires_grad = False
    tuned.H.grad = None
    return tuned, history


def stack_prompts(prompts: dict[str, PromptMatrix]) -> tuple[Tensor, dict[str, int]]:
    """Concatenate per-class prompts into one row table plus per-class row offsets."""
    missing = [c for c in CLASSES if c not in prompts]
    if missing:
        raise ConfigError(f"missing prompts for classes {missing}")
    offsets, rows, start = {}, [], 0
    for c in CLASSES:
        offsets[c] = start
        rows.append(prompts[c].H)
        start += prompts[c].p
    return T.concat(rows, 0), offsets
