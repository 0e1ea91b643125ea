"""Entailment classifier over fused [CLS] vectors, and the entity-typing baseline."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ctm import tensor as T
from ctm.checkpoint import load_arrays, save_arrays
from ctm.data import CLASSES, ENTAILMENT, Example, FormattedInput, PairedExample, format_input
from ctm.encoder import Backbone, collate, config_dict, config_from_dict
from ctm.errors import ConfigError, ContractError, InvariantError
from ctm.mlm import batches
from ctm.optim import Adam, checksum
from ctm.prompt import PromptMatrix, stack_prompts
from ctm.rng import Rng
from ctm.tensor import Tensor
from ctm.tokenize import Vocab

log = logging.getLogger(__name__)

FUSION_MODES = ("add", "concat", "bert-only", "char-only")
HIDDEN_SIZES = (100, 50)


def _backbone_kinds(mode: str) -> tuple[str, ...]:
    if mode in ("add", "concat"):
        return ("wordpiece", "char")
    if mode == "bert-only":
        return ("wordpiece",)
    if mode == "char-only":
        return ("char",)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def fuse(v_bert: Tensor | None, v_char: Tensor | None, alpha: Tensor, mode: str) -> Tensor:
    """concat: [v_bert, alpha * v_char]; add: v_bert + alpha * v_char; single modes pass through."""
    if mode == "bert-only":
        return v_bert
    if mode == "char-only":
        return v_char
    if v_bert.shape != v_char.shape:
        raise ContractError(f"fuse: widths differ, {v_bert.shape} vs {v_char.shape}")
    weighted = T.mul(v_char, alpha)
    if mode == "add":
        return T.add(v_bert, weighted)
    if mode == "concat":
        return T.concat([v_bert, weighted], -1)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def choose_classes(scores: np.ndarray) -> list[str]:
    """Row-wise argmax over class scores; ties resolve brand < product < feature."""
    # np.argmax returns the first maximum
    return [CLASSES[i] for i in np.argmax(np.asarray(scores), axis=1)]


class MlpHead:
    """Linear -> ReLU -> Linear -> ReLU -> Linear, hidden widths 100 and 50 by default."""

    def __init__(self, d_in: int, n_out: int, rng: Rng, hidden: tuple[int, ...] = HIDDEN_SIZES):
        dims = (d_in, *hidden, n_out)
        self.params: dict[str, Tensor] = {}
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.params[f"w{i}"] = Tensor(rng.normal(0, math.sqrt(2.0 / a), (a, b)), requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(b), requires_grad=True)
        self.n_layers = len(dims) - 1

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(self.n_layers):
            x = T.add(T.matmul(x, self.params[f"w{i}"]), self.params[f"b{i}"])
            if i < self.n_layers - 1:
                x = T.relu(x)
        return x


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 6
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError(f"invalid training config {self}")


@dataclass
class Hypotheses:
    """Per-class hypotheses for one backbone: tuned/initial prompt matrices or literal phrases."""

    prompts: dict[str, PromptMatrix] | None = None
    phrases: dict[str, str] | None = None

    def __post_init__(self):
        if (self.prompts is None) == (self.phrases is None):
            raise ContractError("hypotheses need exactly one of prompts or phrases")
        source = self.prompts if self.prompts is not None else self.phrases
        missing = [c for c in CLASSES if c not in source]
        if missing:
            raise ConfigError(f"missing hypotheses for classes {missing}")


class EntailmentModel:
    def __init__(self, backbones: dict[str, Backbone], hypotheses: dict[str, Hypotheses], mode: str,
                 vocab: Vocab, rng: Rng, alpha_init: float = 1.0):
        kinds = _backbone_kinds(mode)
        missing = [k for k in kinds if k not in backbones or k not in hypotheses]
        if missing:
            raise ConfigError(f"fusion mode {mode!r} needs backbones and hypotheses for {missing}")
        self.mode = mode
        self.kinds = kinds
        self.backbones = {k: backbones[k] for k in kinds}
        self.hypotheses = {k: hypotheses[k] for k in kinds}
        self.vocab = vocab
        d = self.backbones[kinds[0]].config.d
        if any(b.config.d != d for b in self.backbones.values()):
            raise ConfigError("backbones must share the embedding width")
        self.d = d
        self.alpha = Tensor(np.array([alpha_init]), requires_grad=True, name="alpha")
        self.head = MlpHead(2 * d if mode == "concat" else d, 2, rng.split("head"))
        self._prompt_tables: dict[str, tuple[Tensor, dict[str, int]]] = {}
        for k in kinds:
            h = self.hypotheses[k]
            if h.prompts is not None:
                for pm in h.prompts.values():
                    pm.H.requires_grad = False
                self._prompt_tables[k] = stack_prompts(h.prompts)

    # -- parameters

    def trainable_params(self) -> dict[str, Tensor]:
        out = {}
        for k, bb in self.backbones.items():
            for name, t in bb.params.items():
                if name not in bb.mlm_only_params:
                    out[f"{k}/{name}"] = t
        for name, t in self.head.params.items():
            out[f"head/{name}"] = t
        if self.mode in ("add", "concat"):
            out["alpha"] = self.alpha
        return out

    def prompt_checksum(self) -> str:
        arrays = {f"{k}/{c}": pm.H for k, h in self.hypotheses.items() if h.prompts
                  for c, pm in h.prompts.items()}
        return checksum(arrays)

    # -- forward

    def format(self, title: str, entity: str, label: str, kind: str) -> FormattedInput:
        h = self.hypotheses[kind]
        hyp = h.prompts[label].p if h.prompts is not None else h.phrases[label]
        return format_input(title, entity, hyp, kind=kind, vocab=self.vocab,
                            max_seq=self.backbones[kind].config.max_seq, hypothesis_class=label)

    def cls_vectors(self, items: Sequence[tuple[str, str, str]], kind: str, pad_to: int | None = None) -> Tensor:
        inputs = [self.format(t, e, c, kind) for t, e, c in items]
        table, offsets = self._prompt_tables.get(kind, (None, None))
        n_rows = 0 if table is None else table.shape[0]
        batch = collate(inputs, kind, len(self.vocab), offsets, n_rows, pad_to=pad_to)
        bb = self.backbones[kind]
        return bb.cls(bb.forward(batch, table))

    def logits(self, items: Sequence[tuple[str, str, str]], pad_to: int | None = None) -> Tensor:
        """(B, 2) entailment / non-entailment logits for (title, entity, class) triples."""
        vecs = {k: self.cls_vectors(items, k, pad_to) for k in self.kinds}
        fused = fuse(vecs.get("wordpiece"), vecs.get("char"), self.alpha, self.mode)
        return self.head(fused)

    def entailment_probs(self, items: Sequence[tuple[str, str, str]], batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(items), batch_size):
                logits = self.logits(items[i:i + batch_size])
                out.append(T.softmax(logits).data[:, ENTAILMENT])
        return np.concatenate(out) if out else np.zeros(0)

    def forward_entailment(self, title: str, entity: str, label: str) -> float:
        return float(self.entailment_probs([(title, entity, label)])[0])

    def class_scores(self, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
        """(N, 3) entailment probability of each class hypothesis."""
        items = [(ex.title, ex.entity, c) for ex in examples for c in CLASSES]
        return self.entailment_probs(items, batch_size).reshape(len(examples), len(CLASSES))

    def predict(self, examples: Sequence[Example], batch_size: int = 64) -> list[str]:
        return choose_classes(self.class_scores(examples, batch_size))

    def predict_class(self, title: str, entity: str) -> str:
        return self.predict([Example(title, entity, CLASSES[0])])[0]


def train_step2(model: EntailmentModel, pairs: Sequence[PairedExample], cfg: TrainConfig, rng: Rng) -> dict:
    """Cross-entropy over entailment labels; prompts stay frozen and are checked bit-for-bit."""
    cfg.validate()
    if not pairs:
        raise ConfigError("train_step2: no training pairs")
    params = model.trainable_params()
    for t in params.values():
        t.requires_grad = True
    prompt_sum = model.prompt_checksum()
    opt = Adam(params, lr=cfg.learning_rate)
    items = [(p.title, p.entity, p.hypothesis_class) for p in pairs]
    labels = np.array([p.label for p in pairs], dtype=np.int64)
    history = {"epoch_loss": [], "alpha": []}
    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch-{epoch}")
        total = 0.0
        for idx in batches(len(items), cfg.batch_size, erng):
            loss = T.cross_entropy(model.logits([items[i] for i in idx]), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history["epoch_loss"].append(total / len(items))
        history["alpha"].append(float(model.alpha.data[0]))
        log.info("step2 %s epoch %d loss %.4f alpha %.4f", model.mode, epoch + 1,
                 history["epoch_loss"][-1], history["alpha"][-1])
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    if model.prompt_checksum() != prompt_sum:
        raise InvariantError("prompt matrices changed during classifier training")
    return history


class BaselineModel:
    """3-way classifier on the [CLS] vector of ``[CLS] title [SEP] entity``."""

    def __init__(self, backbone: Backbone, vocab: Vocab, rng: Rng):
        if backbone.kind != "wordpiece":
            raise ConfigError("the baseline uses the wordpiece backbone")
        self.backbone = backbone
        self.vocab = vocab
        self.head = MlpHead(backbone.config.d, len(CLASSES), rng.split("head"))

    def trainable_params(self) -> dict[str, Tensor]:
        out = {f"wordpiece/{k}": t for k, t in self.backbone.params.items()
               if k not in self.backbone.mlm_only_params}
        out.update({f"head/{k}": t for k, t in self.head.params.items()})
        return out

    def logits(self, examples: Sequence[Example]) -> Tensor:
        inputs = [format_input(ex.title, ex.entity, None, kind="wordpiece", vocab=self.vocab,
                               max_seq=self.backbone.config.max_seq) for ex in examples]
        batch = collate(inputs, "wordpiece", len(self.vocab))
        return self.head(self.backbone.cls(self.backbone.forward(batch)))

    def predict(self, examples: Sequence[Example], batch_size: int = 64) -> list[str]:
        return choose_classes(self.class_logits(examples, batch_size))

    def class_logits(self, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(examples), batch_size):
                out.append(self.logits(examples[i:i + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, len(CLASSES)))


def train_baseline(model: BaselineModel, examples: Sequence[Example], cfg: TrainConfig, rng: Rng) -> dict:
    cfg.validate()
    if not examples:
        raise ConfigError("train_baseline: no training examples")
    params = model.trainable_params()
    for t in params.values():
        t.requires_grad = True
    opt = Adam(params, lr=cfg.learning_rate)
    labels = np.array([CLASSES.index(ex.gold) for ex in examples], dtype=np.int64)
    history = {"epoch_loss": []}
    for epoch in range(cfg.epochs):
        erng = rng.split(f"epoch-{epoch}")
        total = 0.0
        for idx in batches(len(examples), cfg.batch_size, erng):
            loss = T.cross_entropy(model.logits([examples[i] for i in idx]), labels[idx])
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        history["epoch_loss"].append(total / len(examples))
        log.info("baseline epoch %d loss %.4f", epoch + 1, history["epoch_loss"][-1])
    for t in params.values():
        t.requires_grad = False
        t.grad = None
    return history


# ---------------------------------------------------------------- checkpoints


def save_model(path: str | Path, model: EntailmentModel | BaselineModel, prompt_files: dict | None = None,
               extra_meta: dict | None = None) -> None:
    """Bundle backbones, head and alpha; prompts are referenced by file path, phrases inlined."""
    arrays: dict[str, np.ndarray] = {}
    meta: dict = dict(extra_meta or {})
    if isinstance(model, BaselineModel):
        meta["model"] = "baseline"
        meta["encoder"] = {"wordpiece": config_dict(model.backbone.config)}
        arrays.update({f"wordpiece/{k}": v for k, v in model.backbone.state_dict().items()})
    else:
        meta["model"] = "entailment"
        meta["fusion"] = model.mode
        meta["encoder"] = {k: config_dict(b.config) for k, b in model.backbones.items()}
        for k, bb in model.backbones.items():
            arrays.update({f"{k}/{n}": v for n, v in bb.state_dict().items()})
        arrays["alpha"] = model.alpha.data
        hyp = {}
        for k, h in model.hypotheses.items():
            if h.phrases is not None:
                hyp[k] = {"phrases": h.phrases}
            else:
                files = (prompt_files or {}).get(k)
                if not files:
                    raise ContractError(f"prompt files for backbone {k!r} are required to save this model")
                hyp[k] = {"prompt_files": {c: str(files[c]) for c in CLASSES}}
        meta["hypotheses"] = hyp
    arrays.update({f"head/{k}": t.data for k, t in model.head.params.items()})
    save_arrays(path, arrays, meta)


def load_model(path: str | Path, vocab: Vocab) -> EntailmentModel | BaselineModel:
    path = Path(path)
    arrays, meta = load_arrays(path)
    rng = Rng(0)

    def backbone(kind: str) -> Backbone:
        bb = Backbone(config_from_dict(meta["encoder"][kind]), kind, rng)
        prefix = kind + "/"
        bb.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        bb.set_trainable(False)
        return bb

    if meta.get("model") == "baseline":
        model = BaselineModel(backbone("wordpiece"), vocab, rng)
    elif meta.get("model") == "entailment":
        kinds = _backbone_kinds(meta["fusion"])
        hyps = {}
        for k in kinds:
            h = meta["hypotheses"][k]
            if "phrases" in h:
                hyps[k] = Hypotheses(phrases=h["phrases"])
            else:
                prompts = {}
                for c, f in h["prompt_files"].items():
                    fp = Path(f)
                    prompts[c] = PromptMatrix.load(fp if fp.is_absolute() else path.parent / fp)
                hyps[k] = Hypotheses(prompts=prompts)
        model = EntailmentModel({k: backbone(k) for k in kinds}, hyps, meta["fusion"], vocab, rng)
        model.alpha.data = np.array(arrays["alpha"], dtype=np.float64)
        model.alpha.requires_grad = False
    else:
        raise ContractError(f"{path}: unknown model type {meta.get('model')!r}")
    for k, t in model.head.params.items():
        t.data = np.array(arrays[f"head/{k}"], dtype=np.float64)
        t.requires_grad = False
    return model
