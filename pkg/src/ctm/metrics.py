"""Per-class F1, macro averages and the ablation report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

from ctm.data import CLASSES
from ctm.errors import ContractError

DATASET_TAGS = ("test", "novel", "made-up-brand")


@dataclass
class ConfusionCounts:
    tp: dict[str, int]
    fp: dict[str, int]
    fn: dict[str, int]

    @classmethod
    def from_labels(cls, gold: Sequence[str], pred: Sequence[str]) -> "ConfusionCounts":
        if len(gold) != len(pred):
            raise ContractError(f"gold has {len(gold)} labels but pred has {len(pred)}")
        bad = sorted({x for x in (*gold, *pred) if x not in CLASSES})
        if bad:
            raise ContractError(f"labels outside the class set: {bad}")
        tp = dict.fromkeys(CLASSES, 0)
        fp = dict.fromkeys(CLASSES, 0)
        fn = dict.fromkeys(CLASSES, 0)
        for g, p in zip(gold, pred):
            if g == p:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
        return cls(tp, fp, fn)

    def support(self, c: str) -> int:
        return self.tp[c] + self.fn[c]


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass
class MetricsReport:
    dataset: str
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    undefined: list[str] = field(default_factory=list)  # classes whose F1 hit the 0/0 rule

    @property
    def average(self) -> float:
        return sum(self.f1[c] for c in CLASSES) / len(CLASSES)

    @property
    def weighted_average(self) -> float:
        total = sum(self.support.values())
        return _ratio(sum(self.f1[c] * self.support[c] for c in CLASSES), total)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "precision": {c: self.precision[c] for c in CLASSES},
            "recall": {c: self.recall[c] for c in CLASSES},
            "f1": {c: self.f1[c] for c in CLASSES},
            "support": {c: self.support[c] for c in CLASSES},
            "average_f1": self.average,
            "weighted_f1": self.weighted_average,
            "undefined": list(self.undefined),
        }


def per_class_f1(gold: Sequence[str], pred: Sequence[str], dataset: str = "test") -> MetricsReport:
    counts = ConfusionCounts.from_labels(gold, pred)
    precision, recall, f1, undefined = {}, {}, {}, []
    for c in CLASSES:
        tp, fp, fn = counts.tp[c], counts.fp[c], counts.fn[c]
        precision[c] = _ratio(tp, tp + fp)
        recall[c] = _ratio(tp, tp + fn)
        # 2PR/(P+R) == 2tp/(2tp+fp+fn), and the latter is exact in integers
        f1[c] = _ratio(2 * tp, 2 * tp + fp + fn)
        if 2 * tp + fp + fn == 0:
            undefined.append(c)
    return MetricsReport(dataset, precision, recall, f1, {c: counts.support(c) for c in CLASSES}, undefined)


# ---------------------------------------------------------------- ablation report

CTM_VARIANTS = ("CTM (add)", "CTM (concat)")
VARIANT_ORDER = (
    "Entity Typing",
    "Textual Entailment",
    "CTM (add)",
    "w/o prompt tuning (add)",
    "CTM (concat)",
    "w/o prompt tuning (concat)",
    "CTM (char only)",
    "CTM (bert only)",
)
SOURCE_ORDER = ("-", "labels", "dictionary")


@dataclass(frozen=True)
class RunKey:
    hypothesis_source: str  # "-" for the baseline
    variant: str


def _order(key: RunKey) -> tuple:
    # Entity Typing first, then every Textual Entailment row, then the CTM block per source
    te_rows = key.variant in VARIANT_ORDER[:2]
    v = VARIANT_ORDER.index(key.variant) if key.variant in VARIANT_ORDER else len(VARIANT_ORDER)
    s = SOURCE_ORDER.index(key.hypothesis_source) if key.hypothesis_source in SOURCE_ORDER else len(SOURCE_ORDER)
    return (0, v, s, key.variant) if te_rows else (1, s, v, key.variant)


@dataclass
class AblationReport:
    dataset: str
    rows: list[tuple[RunKey, MetricsReport]]
    deltas: list[dict]

    def to_jsonl(self) -> str:
        lines = []
        for key, rep in self.rows:
            lines.append({"kind": "row", "hypothesis_source": key.hypothesis_source, "variant": key.variant,
                          **rep.to_dict()})
        for d in self.deltas:
            lines.append({"kind": "delta", "dataset": self.dataset, **d})
        return "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)

    def to_text(self) -> str:
        header = f"{'Hypotheses':<12} {'Model':<28} {'Brand':>7} {'Product':>7} {'Feature':>7} {'Average':>7}"
        out = [f"dataset: {self.dataset}", header, "-" * len(header)]
        for key, rep in self.rows:
            f = rep.f1
            out.append(f"{key.hypothesis_source:<12} {key.variant:<28} {f['brand']:7.4f} {f['product']:7.4f} "
                       f"{f['feature']:7.4f} {rep.average:7.4f}")
        if self.deltas:
            out += ["", "CTM improvement over other models (F1 points)"]
            for d in self.deltas:
                cols = " ".join(f"{d['delta'][c]:+7.2f}" for c in (*CLASSES, "average"))
                out.append(f"{d['hypothesis_source']:<12} {d['ctm']:<14} vs {d['other']:<26} {cols}")
        return "\n".join(out) + "\n"


def _points(a: MetricsReport, b: MetricsReport) -> dict[str, float]:
    d = {c: round(100.0 * (a.f1[c] - b.f1[c]), 10) for c in CLASSES}
    d["average"] = round(100.0 * (a.average - b.average), 10)
    return d


def ablation_report(results: Sequence[tuple[RunKey, MetricsReport]]) -> AblationReport:
    """Order rows like the published tables and compute CTM-vs-other deltas per hypothesis source."""
    if not results:
        raise ContractError("ablation_report needs at least one result")
    tags = {rep.dataset for _, rep in results}
    if len(tags) != 1:
        raise ContractError(f"results mix dataset tags {sorted(tags)}")
    seen: dict[RunKey, MetricsReport] = {}
    for key, rep in results:
        if key in seen:
            raise ContractError(f"duplicate result for {key}")
        seen[key] = rep
    rows = sorted(seen.items(), key=lambda kv: _order(kv[0]))
    deltas = []
    for key, rep in rows:
        if key.variant not in CTM_VARIANTS:
            continue
        for other, orep in rows:
            if other == key or other.variant in CTM_VARIANTS:
                continue
            if other.hypothesis_source not in (key.hypothesis_source, "-"):
                continue
            deltas.append({"hypothesis_source": key.hypothesis_source, "ctm": key.variant,
                           "other": other.variant, "delta": _points(rep, orep)})
    return AblationReport(tags.pop(), rows, deltas)
