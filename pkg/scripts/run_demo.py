#!/usr/bin/env python3
"""Run the bundled demo end to end and print the per-phase scoreboard.

Stages the full pipeline (ingest -> split -> augment -> train -> evaluate)
into a work directory, runs the demo narrative through the trained models,
and prints the evaluation table plus the extracted attack paths.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from killchain.cli import main as cli_main


def print_scoreboard(work: Path) -> None:
    summary = json.loads((work / "eval/summary.json").read_text())
    header = f"{'phase':<22} {'scorer':<10} {'acc':>6} {'prec':>6} {'rec':>6} {'f1':>6}"
    print(header)
    print("-" * len(header))
    for phase, report in sorted(summary.items()):
        rows = list(report["scorers"].items()) + [("ensemble", report["ensemble"])]
        for name, metrics in rows:
            print(
                f"{phase:<22} {name:<10} "
                f"{metrics['accuracy']:>6.3f} {metrics['precision']:>6.3f} "
                f"{metrics['recall']:>6.3f} {metrics['f1_score']:>6.3f}"
            )
        delta = report["delta_vs_best"]["f1_score"]
        print(f"{'':<22} ensemble minus best ({report['best_scorer']}): {delta:+.3f} F1")
    print()


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--work", default="work", help="work directory (default: work)")
    parser.add_argument("--sweep", action="store_true",
                        help="also run the num_leaves grid sweep per phase")
    args = parser.parse_args()

    commands = [["ingest"], ["split"], ["augment"], ["train"], ["evaluate"]]
    if args.sweep:
        commands.insert(4, ["train", "--sweep"])
    for command in commands:
        code = cli_main(["--work", args.work, *command])
        if code != 0:
            return code

    print_scoreboard(Path(args.work))
    return cli_main(["--work", args.work, "narrative"])


if __name__ == "__main__":
    raise SystemExit(main())
