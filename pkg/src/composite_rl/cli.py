"""Command-line entry point: ``composite-rl {gen,single,transfer,sweep,check}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace

from .exceptions import AssumptionViolation
from .harness import COMMANDS, ExperimentConfig, parse_seeds

log = logging.getLogger("composite_rl")


def build_parser():
    parser = argparse.ArgumentParser(prog="composite-rl",
                                     description="Composite-MDP generation and UCB experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("gen", "write instance and task-pair JSON files"),
                            ("single", "run single-task UCB-Q per seed"),
                            ("transfer", "run UCB-TQL variants against UCB-Q per seed"),
                            ("sweep", "sweep the number of source episodes"),
                            ("check", "assumption and invariant diagnostics")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment/v1 JSON config")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seeds", help="seed list, e.g. 0-9 or 1,3,5 (overrides config)")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--override-assumptions", action="store_true",
                       help="warn instead of failing when an instance breaks an assumption")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.out:
        updates["out"] = args.out
    if args.seeds:
        updates["seeds"] = parse_seeds(args.seeds)
    if args.workers:
        updates["workers"] = args.workers
    if args.override_assumptions:
        updates["override_assumptions"] = True
    return replace(cfg, **updates)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    if not args.verbose:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        result = COMMANDS[args.command](cfg)
    except AssumptionViolation as exc:
        print(f"error: {exc} (pass --override-assumptions to proceed)", file=sys.stderr)
        return 3
    if args.command == "check":
        report, ok = result
        print(json.dumps({"ok": ok, "failures": report["failures"],
                          "warnings": report["warnings"]}, indent=1))
        return 0 if ok else 1
    log.info("wrote results to %s", cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
