"""Command-line surface: ingest -> split -> augment -> train -> evaluate ->
predict/chain/narrative, with hash-chained artifacts between stages.

Exit codes: 0 success, 1 configuration/stale-artifact problems, 2 any
module-level contract or data error. Progress goes to stderr; artifacts stay
in the work directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, KillchainError, StaleArtifactError
from .phases import Phase
from .pipeline import (
    Workspace,
    demo_config,
    load_config,
    stage_augment,
    stage_chain,
    stage_evaluate,
    stage_ingest,
    stage_narrative,
    stage_predict,
    stage_split,
    stage_train,
    stage_verify,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="killchain",
        description="Phase-aware kill chain inference pipeline",
    )
    parser.add_argument("--config", help="pipeline config JSON (default: bundled demo)")
    parser.add_argument("--work", help="override the work directory")
    parser.add_argument("--phase", help="restrict to one phase (train/evaluate/predict)")
    parser.add_argument("--tau", type=float, help="override the edge threshold")
    parser.add_argument("--k-pred", type=int, help="override candidates per phase")
    parser.add_argument("--seed", type=int, help="override every stage seed")
    parser.add_argument("--verbose", action="store_true", help="debug logging")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", help="parse the bundle and assign phases")
    sub.add_parser("split", help="stratified per-phase train/validation/test split")
    sub.add_parser("augment", help="augment minority labels of the training split")
    train = sub.add_parser("train", help="train native scorers per phase")
    train.add_argument("--sweep", action="store_true", help="grid over num_leaves")
    sub.add_parser("evaluate", help="score, weight, and report all scorers + ensemble")
    predict = sub.add_parser("predict", help="probability matrix for given texts")
    predict.add_argument("--input", required=True, help='JSONL of {"id", "text"}')
    predict.add_argument("--scorer", default="ensemble", help="gbdt | softmax | ensemble")
    predict.add_argument("--output", help="output matrix path")
    chain = sub.add_parser("chain", help="build a graph from a predictions file")
    chain.add_argument("--predictions", required=True, help="predictions JSON")
    chain.add_argument("--format", choices=("dot", "json"), default="json")
    narrative = sub.add_parser("narrative", help="full narrative-to-graph pipeline")
    narrative.add_argument("--text", help="narrative file (default: bundled demo, '-': stdin)")
    narrative.add_argument("--format", choices=("dot", "json"), default="json")
    sub.add_parser("verify", help="re-hash all artifacts and report drift")
    return parser


def resolve_config(args: argparse.Namespace):
    cfg = load_config(args.config) if args.config else demo_config()
    overrides = {}
    if args.work is not None:
        overrides["work_dir"] = args.work
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.k_pred is not None:
        overrides["k_pred"] = args.k_pred
    if overrides or args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, **overrides)
        if args.seed is not None:
            cfg = replace(
                cfg,
                split=replace(cfg.split, seed=args.seed),
                augment=replace(cfg.augment, seed=args.seed),
                gbdt=replace(cfg.gbdt, seed=args.seed),
                softmax=replace(cfg.softmax, seed=args.seed),
            )
    return cfg


def _phase_arg(args: argparse.Namespace) -> Phase | None:
    return Phase.from_label(args.phase) if args.phase else None


def _narrative_text(args: argparse.Namespace) -> str:
    if args.text == "-":
        return sys.stdin.read()
    if args.text:
        return Path(args.text).read_text(encoding="utf-8")
    from importlib import resources

    return (resources.files("killchain") / "data" / "demo_narrative.txt").read_text(
        encoding="utf-8"
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        if args.command == "ingest":
            stage_ingest(cfg)
        elif args.command == "split":
            stage_split(cfg)
        elif args.command == "augment":
            stage_augment(cfg)
        elif args.command == "train":
            stage_train(cfg, phase=_phase_arg(args), sweep=args.sweep)
        elif args.command == "evaluate":
            stage_evaluate(cfg, phase=_phase_arg(args))
        elif args.command == "predict":
            if not args.phase:
                raise ConfigError("predict requires --phase")
            out = stage_predict(
                cfg, _phase_arg(args), args.input, args.scorer, args.output
            )
            print(out)
        elif args.command == "chain":
            written = stage_chain(cfg, args.predictions)
            ws = Workspace(cfg)
            target = "chains/graph.dot" if args.format == "dot" else "chains/graph.json"
            print(ws.path(target))
        elif args.command == "narrative":
            run, written = stage_narrative(cfg, _narrative_text(args))
            ws = Workspace(cfg)
            sys.stdout.write(
                ws.path("chains/paths.txt").read_text(encoding="utf-8")
            )
            target = "chains/graph.dot" if args.format == "dot" else "chains/graph.json"
            print(f"graph: {ws.path(target)}")
            print(f"run:   {ws.path('chains/run.json')}")
        elif args.command == "verify":
            drifted, orphaned = stage_verify(cfg)
            for line in drifted:
                print(f"DRIFT {line}", file=sys.stderr)
            for line in orphaned:
                print(f"ORPHAN {line}", file=sys.stderr)
            if drifted:
                return 1
            print(f"verified {len(Workspace(cfg).recorded_outputs())} artifacts, no drift")
    except (ConfigError, StaleArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KillchainError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
