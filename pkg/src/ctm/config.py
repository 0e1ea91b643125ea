"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from ctm.errors import ConfigError

MODELS = ("ctm", "te", "baseline")
FUSIONS = ("add", "concat", "bert-only", "char-only")
SOURCES = ("labels", "dictionary", "both", "handcrafted")
DATASETS = ("test", "novel", "made-up-brand")


@dataclass
class RunConfig:
    # main hyperparameters
    model: str = "ctm"
    dataset: str = "test"
    max_seq: int = 64
    batch_size: int = 32
    learning_rate: float = 1e-3
    epoch: int = 5
    alpha_init: float = 1.0
    fusion: str = "add"
    hypothesis_source: str = "both"  # single-model commands read "both" as labels
    seed: int = 0
    # single-model selection
    prompt_tuning: bool = True
    # synthetic corpus
    train_counts: tuple[int, ...] = (797, 700, 827)
    test_counts: tuple[int, ...] = (360, 437, 520)
    n_self_made_brands: int = 80
    reserve_fraction: float = 0.3
    novel_rate: float = 0.45
    # vocabulary and encoder
    vocab_size: int = 512
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    # MLM pretraining and prompt tuning
    pretrain_epochs: int = 8
    pretrain_learning_rate: float = 1e-3
    pretrain_batch_size: int = 32
    tune_epochs: int = 3
    tune_learning_rate: float = 5e-3
    tune_batch_size: int = 32
    mask_rate: float = 0.15
    # pipeline: comma-separated variant names, or "all"
    variants: tuple[str, ...] = ("all",)

    def validate(self) -> None:
        for name, allowed in (("model", MODELS), ("fusion", FUSIONS),
                              ("hypothesis_source", SOURCES), ("dataset", DATASETS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        positive = ("max_seq", "batch_size", "vocab_size", "d", "heads", "ff_dim",
                    "pretrain_batch_size", "tune_batch_size")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epoch", "pretrain_epochs", "tune_epochs", "layers"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("learning_rate", "pretrain_learning_rate", "tune_learning_rate"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if len(self.train_counts) != 3 or len(self.test_counts) != 3:
            raise ConfigError("train_counts and test_counts need one count per class")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")

    def replace(self, **changes) -> "RunConfig":
        out = dataclasses.replace(self, **changes)
        out.validate()
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(int(p) for p in parts) if default and isinstance(default[0], int) else tuple(parts)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        changes[key] = _coerce(key, value, known[key])
    return base.replace(**changes)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = parse_config(text, cfg)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides)
