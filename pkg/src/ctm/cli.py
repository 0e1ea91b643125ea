"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal
invariant failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ctm import pipeline as P
from ctm.config import DATASETS, RunConfig, load_config
from ctm.errors import ConfigError, CTMError
from ctm.metrics import ablation_report

log = logging.getLogger("ctm")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: ./run)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctm", description="Entity typing as textual entailment with tuned prompts.")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-data", help="write the synthetic train/test corpus and manifest"))
    _common(sub.add_parser("build-vocab", help="build the wordpiece vocabulary"))
    p = sub.add_parser("pretrain", help="MLM-pretrain the backbones")
    _common(p)
    p.add_argument("--kind", choices=("wordpiece", "char", "both"), default="both")
    _common(sub.add_parser("prompt-tune", help="tune per-class prompts on the frozen backbones"))
    p = sub.add_parser("train", help="train one classifier variant")
    _common(p)
    p.add_argument("--variant", help="variant name (default: derived from model/fusion/hypothesis_source)")
    p = sub.add_parser("eval", help="evaluate a trained variant")
    _common(p)
    p.add_argument("--variant", help="variant name (default: derived from the config)")
    p.add_argument("--dataset", choices=DATASETS, help="overrides the config dataset tag")
    p = sub.add_parser("pipeline", help="run every stage and write the ablation reports")
    _common(p)
    p.add_argument("--reuse-data", action="store_true", help="keep an existing corpus in the run directory")
    return parser


def _variant(cfg: RunConfig, name: str | None) -> P.Variant:
    if name is None:
        return P.variant_from_config(cfg)
    by_name = {v.name: v for v in P.all_variants()}
    if name not in by_name:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(by_name)}")
    return by_name[name]


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, seed=args.seed)
    run_dir = P.RunDir(args.out)
    if args.command != "pipeline":
        P.write_resolved_config(cfg, P.RunDir(args.out / "configs" / args.command))
    if args.command == "gen-data":
        P.run_gen_data(cfg, run_dir)
    elif args.command == "build-vocab":
        P.run_build_vocab(cfg, run_dir)
    elif args.command == "pretrain":
        kinds = P.KINDS if args.kind == "both" else (args.kind,)
        for kind, h in P.run_pretrain(cfg, run_dir, kinds).items():
            final = h["epoch_loss"][-1] if h["epoch_loss"] else h["init_loss"]
            print(f"{kind}: initial loss {h['init_loss']:.4f}, final loss {final:.4f}")
    elif args.command == "prompt-tune":
        P.run_prompt_tune(cfg, run_dir)
    elif args.command == "train":
        v = _variant(cfg, args.variant)
        P.run_train(cfg, run_dir, v)
        print(f"trained {v.name} -> {run_dir.model(v.name)}")
    elif args.command == "eval":
        v = _variant(cfg, args.variant)
        dataset = args.dataset or cfg.dataset
        rep = P.run_eval(cfg, run_dir, v.name, [dataset])[dataset]
        report = ablation_report([(v.key, rep)])
        path = run_dir.root / "reports" / f"{v.name}.{dataset}"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(path.suffix + ".jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        print(report.to_text(), end="")
    elif args.command == "pipeline":
        reports = P.run_pipeline(cfg, run_dir, fresh_data=not args.reuse_data)
        for rep in reports.values():
            print(rep.to_text())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except CTMError as e:
        where = f" in stage {e.stage}" if getattr(e, "stage", None) else ""
        print(f"error{where}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
