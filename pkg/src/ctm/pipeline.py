"""Pipeline stages. Each stage reads its inputs from, and writes its outputs to, a run directory.

Layout under the run directory::

    data/train.tsv  data/test.tsv  data/manifest.json  data/{train,test}.rejects.tsv
    vocab.txt
    backbones/{wordpiece,char}.npz
    prompts/{kind}-{source}-{class}.npz
    models/{variant}.npz
    reports/{dataset}.jsonl  reports/{dataset}.txt
    config.resolved
"""

from __future__ import annotations

import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

from ctm.checkpoint import load_arrays, save_arrays
from ctm.config import RunConfig
from ctm.data import (
    CLASSES, Example, build_novel_entity_set, build_pairs, hypothesis_phrases, load_corpus, write_corpus,
    write_rejects,
)
from ctm.encoder import KINDS, Backbone, EncoderConfig, config_dict, config_from_dict
from ctm.errors import CTMError, ConfigError, DataError
from ctm.metrics import AblationReport, MetricsReport, RunKey, ablation_report, per_class_f1
from ctm.mlm import MLMConfig, pretrain_mlm
from ctm.model import (
    BaselineModel, EntailmentModel, Hypotheses, TrainConfig, load_model, save_model, train_baseline, train_step2,
)
from ctm.prompt import PromptMatrix, TuneConfig, init_prompt, tune_prompt
from ctm.rng import Rng
from ctm.synth import GenSpec, Manifest, generate_synthetic_corpus, made_up_brand_subset
from ctm.tokenize import Vocab, build_vocab, split_words

log = logging.getLogger(__name__)

PHRASE_SOURCES = ("labels", "dictionary")


@dataclass(frozen=True)
class Variant:
    name: str
    model: str  # ctm | te | baseline
    fusion: str
    source: str  # labels | dictionary | "-"
    prompt_tuning: bool

    @property
    def key(self) -> RunKey:
        if self.model == "baseline":
            return RunKey("-", "Entity Typing")
        if self.model == "te":
            return RunKey(self.source, "Textual Entailment")
        if self.fusion in ("add", "concat"):
            label = f"CTM ({self.fusion})" if self.prompt_tuning else f"w/o prompt tuning ({self.fusion})"
        else:
            label = "CTM (char only)" if self.fusion == "char-only" else "CTM (bert only)"
        return RunKey(self.source, label)

    @property
    def kinds(self) -> tuple[str, ...]:
        if self.model in ("baseline", "te") or self.fusion == "bert-only":
            return ("wordpiece",)
        if self.fusion == "char-only":
            return ("char",)
        return KINDS


def all_variants(sources=PHRASE_SOURCES, prompt_tuning: bool = True) -> list[Variant]:
    out = [Variant("baseline", "baseline", "bert-only", "-", False)]
    for s in sources:
        out.append(Variant(f"te-{s}", "te", "bert-only", s, False))
        for fusion in ("add", "concat"):
            if prompt_tuning:
                out.append(Variant(f"ctm-{fusion}-{s}", "ctm", fusion, s, True))
            out.append(Variant(f"noprompt-{fusion}-{s}", "ctm", fusion, s, False))
        if prompt_tuning:
            out.append(Variant(f"ctm-char-{s}", "ctm", "char-only", s, True))
            out.append(Variant(f"ctm-bert-{s}", "ctm", "bert-only", s, True))
    return out


def variant_from_config(cfg: RunConfig) -> Variant:
    """The single model described by the table columns of ``cfg``."""
    if cfg.model == "baseline":
        return Variant("baseline", "baseline", "bert-only", "-", False)
    s = "labels" if cfg.hypothesis_source in ("both", "handcrafted") else cfg.hypothesis_source
    if cfg.hypothesis_source == "handcrafted" and cfg.model == "ctm" and cfg.prompt_tuning:
        raise ConfigError("hypothesis_source = handcrafted needs prompt_tuning = false or model = te")
    if cfg.model == "te":
        return Variant(f"te-{s}", "te", "bert-only", s, False)
    short = {"add": "add", "concat": "concat", "bert-only": "bert", "char-only": "char"}[cfg.fusion]
    if not cfg.prompt_tuning:
        if cfg.fusion not in ("add", "concat"):
            raise ConfigError("the w/o prompt tuning ablation is defined for add and concat fusion only")
        return Variant(f"noprompt-{short}-{s}", "ctm", cfg.fusion, s, False)
    return Variant(f"ctm-{short}-{s}", "ctm", cfg.fusion, s, True)


def selected_variants(cfg: RunConfig) -> list[Variant]:
    if cfg.hypothesis_source == "handcrafted":
        pool = all_variants(PHRASE_SOURCES, prompt_tuning=False)
    elif cfg.hypothesis_source == "both":
        pool = all_variants(PHRASE_SOURCES)
    else:
        pool = all_variants((cfg.hypothesis_source,))
    if cfg.variants == ("all",):
        return pool
    by_name = {v.name: v for v in all_variants(PHRASE_SOURCES)}
    unknown = [n for n in cfg.variants if n not in by_name]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; known: {sorted(by_name)}")
    return [by_name[n] for n in cfg.variants]


# ---------------------------------------------------------------- run directory


@dataclass(frozen=True)
class RunDir:
    root: Path

    @property
    def train(self) -> Path:
        return self.root / "data" / "train.tsv"

    @property
    def test(self) -> Path:
        return self.root / "data" / "test.tsv"

    @property
    def manifest(self) -> Path:
        return self.root / "data" / "manifest.json"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    def backbone(self, kind: str) -> Path:
        return self.root / "backbones" / f"{kind}.npz"

    def prompt(self, kind: str, source: str, label: str) -> Path:
        return self.root / "prompts" / f"{kind}-{source}-{label}.npz"

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.npz"

    def report(self, dataset: str, suffix: str) -> Path:
        return self.root / "reports" / f"{dataset}.{suffix}"


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} is missing; run {produced_by} first")
    return path


@contextmanager
def stage(name: str):
    """Log timing and tag any failure with the stage name."""
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except CTMError as e:
        e.stage = name
        log.error("stage %s failed: %s", name, e)
        raise
    log.info("stage %s: done in %.1fs", name, time.perf_counter() - t0)


def _mkparent(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved_config(cfg: RunConfig, run: RunDir) -> None:
    text = cfg.to_text()
    _mkparent(run.root / "config.resolved").write_text(text, encoding="utf-8")
    log.info("resolved config:\n%s", text.rstrip())


# ---------------------------------------------------------------- stages


def gen_spec(cfg: RunConfig) -> GenSpec:
    return GenSpec(train_counts=tuple(cfg.train_counts), test_counts=tuple(cfg.test_counts),
                   n_self_made_brands=cfg.n_self_made_brands, reserve_fraction=cfg.reserve_fraction,
                   novel_rate=cfg.novel_rate)


def run_gen_data(cfg: RunConfig, run: RunDir) -> None:
    spec = gen_spec(cfg)
    if sum(spec.train_counts) == 0 or sum(spec.test_counts) == 0:
        raise ConfigError("zero examples requested for a split")
    train, test, manifest = generate_synthetic_corpus(spec, Rng(cfg.seed).split("data"))
    write_corpus(_mkparent(run.train), train)
    write_corpus(run.test, test)
    manifest.save(run.manifest)
    log.info("wrote %d train / %d test examples to %s", len(train), len(test), run.train.parent)


def load_split(run: RunDir, split: str) -> list[Example]:
    path = _require(run.train if split == "train" else run.test, "gen-data")
    examples, rejects = load_corpus(path)
    if rejects:
        write_rejects(path.with_suffix(".rejects.tsv"), rejects)
        log.warning("%s: %d rejected lines", path, len(rejects))
    return examples


def pretraining_titles(run: RunDir) -> list[str]:
    # unlabeled titles of both splits stand in for a general pretraining corpus
    return [ex.title for ex in load_split(run, "train") + load_split(run, "test")]


def reserved_phrase_words() -> list[str]:
    words = []
    for s in PHRASE_SOURCES:
        for phrase in hypothesis_phrases(s).values():
            words.extend(split_words(phrase))
    return list(dict.fromkeys(words))


def run_build_vocab(cfg: RunConfig, run: RunDir) -> Vocab:
    vocab = build_vocab(pretraining_titles(run), cfg.vocab_size, reserved_words=reserved_phrase_words())
    vocab.save(run.vocab)
    log.info("vocabulary of %d entries written to %s", len(vocab), run.vocab)
    return vocab


def load_vocab(run: RunDir) -> Vocab:
    return Vocab.load(_require(run.vocab, "build-vocab"))


def encoder_config(cfg: RunConfig, vocab: Vocab) -> EncoderConfig:
    return EncoderConfig(d=cfg.d, layers=cfg.layers, heads=cfg.heads, ff_dim=cfg.ff_dim,
                         max_seq=cfg.max_seq, vocab_size=len(vocab))


def save_backbone(path: Path, bb: Backbone, history: dict | None = None) -> None:
    save_arrays(_mkparent(path), bb.state_dict(),
                {"kind": bb.kind, "encoder": config_dict(bb.config), "history": history or {}})


def load_backbone(path: Path) -> Backbone:
    arrays, meta = load_arrays(path)
    bb = Backbone(config_from_dict(meta["encoder"]), meta["kind"], Rng(0))
    bb.load_state_dict(arrays)
    bb.set_trainable(False)
    return bb


def run_pretrain(cfg: RunConfig, run: RunDir, kinds=KINDS) -> dict[str, dict]:
    vocab = load_vocab(run)
    titles = pretraining_titles(run)
    root = Rng(cfg.seed)
    mcfg = MLMConfig(mask_rate=cfg.mask_rate, learning_rate=cfg.pretrain_learning_rate,
                     epochs=cfg.pretrain_epochs, batch_size=cfg.pretrain_batch_size, seed=cfg.seed)
    histories = {}
    for kind in kinds:
        bb = Backbone(encoder_config(cfg, vocab), kind, root.split(f"init-{kind}"))
        histories[kind] = pretrain_mlm(bb, titles, vocab, mcfg, root.split(f"pretrain-{kind}"))
        save_backbone(run.backbone(kind), bb, histories[kind])
    return histories


def tune_sources(cfg: RunConfig, variants: list[Variant]) -> dict[str, set[str]]:
    """Which (backbone kind -> phrase sources) need tuned prompts for ``variants``."""
    need: dict[str, set[str]] = {}
    for v in variants:
        if v.model == "ctm" and v.prompt_tuning:
            for k in v.kinds:
                need.setdefault(k, set()).add(v.source)
    return need


def run_prompt_tune(cfg: RunConfig, run: RunDir, need: dict[str, set[str]] | None = None) -> dict:
    """Tune one prompt per (backbone, source, class); up to 6 jobs per source pair."""
    if need is None:
        sources = PHRASE_SOURCES if cfg.hypothesis_source in ("both", "handcrafted") else (cfg.hypothesis_source,)
        need = {k: set(sources) for k in KINDS}
    vocab = load_vocab(run)
    train = load_split(run, "train")
    root = Rng(cfg.seed)
    tcfg = TuneConfig(mask_rate=cfg.mask_rate, learning_rate=cfg.tune_learning_rate, epochs=cfg.tune_epochs,
                      batch_size=cfg.tune_batch_size, seed=cfg.seed)
    histories = {}
    for kind in KINDS:
        if kind not in need:
            continue
        bb = load_backbone(_require(run.backbone(kind), "pretrain"))
        for source in sorted(need[kind]):
            for label in CLASSES:
                init = init_prompt(source, label, bb, vocab)
                examples = [ex for ex in train if ex.gold == label]
                tuned, hist = tune_prompt(bb, examples, init, vocab, tcfg, root.split(f"prompt-{kind}-{source}-{label}"))
                tuned.save(_mkparent(run.prompt(kind, source, label)))
                histories[f"{kind}-{source}-{label}"] = hist
    return histories


def _hypotheses(v: Variant, kind: str, bb: Backbone, vocab: Vocab, run: RunDir) -> tuple[Hypotheses, dict | None]:
    if v.model == "te":
        return Hypotheses(phrases=hypothesis_phrases(v.source)), None
    if v.prompt_tuning:
        files = {c: run.prompt(kind, v.source, c) for c in CLASSES}
        prompts = {c: PromptMatrix.load(_require(f, "prompt-tune")) for c, f in files.items()}
    else:
        # the ablation keeps the initial phrase embeddings untuned
        prompts = {c: init_prompt(v.source, c, bb, vocab) for c in CLASSES}
        files = {c: run.model(v.name).with_name(f"{v.name}.{kind}-{c}.prompt.npz") for c in CLASSES}
        for c in CLASSES:
            prompts[c].save(_mkparent(files[c]))
    # stored relative to the model file so a run directory can be moved
    rel = {c: os.path.relpath(f.resolve(), run.model(v.name).parent.resolve()) for c, f in files.items()}
    return Hypotheses(prompts=prompts), rel


def build_model(cfg: RunConfig, run: RunDir, v: Variant, vocab: Vocab):
    root = Rng(cfg.seed)
    if v.model == "baseline":
        return BaselineModel(load_backbone(_require(run.backbone("wordpiece"), "pretrain")), vocab,
                             root.split(f"model-{v.name}")), None
    backbones, hyps, files = {}, {}, {}
    for kind in v.kinds:
        bb = load_backbone(_require(run.backbone(kind), "pretrain"))
        backbones[kind] = bb
        hyps[kind], files[kind] = _hypotheses(v, kind, bb, vocab, run)
    model = EntailmentModel(backbones, hyps, v.fusion, vocab, root.split(f"model-{v.name}"), cfg.alpha_init)
    return model, files


def run_train(cfg: RunConfig, run: RunDir, v: Variant) -> dict:
    vocab = load_vocab(run)
    train = load_split(run, "train")
    model, files = build_model(cfg, run, v, vocab)
    root = Rng(cfg.seed)
    tcfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epoch, seed=cfg.seed)
    if v.model == "baseline":
        history = train_baseline(model, train, tcfg, root.split(f"train-{v.name}"))
    else:
        # negatives are drawn once per run and shared by every variant
        pairs = build_pairs(train, root.split("pairs"))
        history = train_step2(model, pairs, tcfg, root.split(f"train-{v.name}"))
    save_model(_mkparent(run.model(v.name)), model, files, {"variant": v.name, "history": history})
    return history


def eval_split(run: RunDir, dataset: str) -> list[Example]:
    test = load_split(run, "test")
    if dataset == "test":
        out = test
    elif dataset == "novel":
        out = build_novel_entity_set(load_split(run, "train"), test)
    elif dataset == "made-up-brand":
        out = made_up_brand_subset(test, Manifest.load(_require(run.manifest, "gen-data")))
    else:
        raise ConfigError(f"unknown dataset tag {dataset!r}")
    if not out:
        raise DataError(f"evaluation split {dataset!r} is empty")
    return out


def evaluate(model, examples: list[Example], dataset: str) -> MetricsReport:
    if not examples:
        raise DataError(f"evaluation split {dataset!r} is empty")
    pred = model.predict(examples)
    return per_class_f1([ex.gold for ex in examples], pred, dataset)


def run_eval(cfg: RunConfig, run: RunDir, name: str, datasets) -> dict[str, MetricsReport]:
    vocab = load_vocab(run)
    model = load_model(_require(run.model(name), "train"), vocab)
    return {ds: evaluate(model, eval_split(run, ds), ds) for ds in datasets}


def write_report(run: RunDir, report: AblationReport) -> None:
    _mkparent(run.report(report.dataset, "jsonl")).write_text(report.to_jsonl(), encoding="utf-8")
    run.report(report.dataset, "txt").write_text(report.to_text(), encoding="utf-8")


def run_pipeline(cfg: RunConfig, run: RunDir, datasets=("test", "novel", "made-up-brand"),
                 fresh_data: bool = True) -> dict[str, AblationReport]:
    """gen-data (optional) -> build-vocab -> pretrain -> prompt-tune -> train -> eval -> reports."""
    write_resolved_config(cfg, run)
    variants = selected_variants(cfg)
    if fresh_data or not run.train.exists():
        with stage("gen-data"):
            run_gen_data(cfg, run)
    with stage("build-vocab"):
        run_build_vocab(cfg, run)
    kinds = sorted({k for v in variants for k in v.kinds}, key=KINDS.index)
    with stage("pretrain"):
        run_pretrain(cfg, run, kinds)
    need = tune_sources(cfg, variants)
    if need:
        with stage("prompt-tune"):
            run_prompt_tune(cfg, run, need)
    results: dict[str, list] = {ds: [] for ds in datasets}
    for v in variants:
        with stage(f"train:{v.name}"):
            run_train(cfg, run, v)
        with stage(f"eval:{v.name}"):
            for ds, rep in run_eval(cfg, run, v.name, datasets).items():
                results[ds].append((v.key, rep))
                log.info("%s on %s: average F1 %.4f", v.name, ds, rep.average)
    reports = {}
    with stage("report"):
        for ds in datasets:
            reports[ds] = ablation_report(results[ds])
            write_report(run, reports[ds])
    return reports
