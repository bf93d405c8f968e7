"""Command-line front end: ``protosal <verb> [--config PATH] [--seed N]
[--out DIR] [--jobs N]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import pipeline
from .classifier import TrainingDiverged
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

VERBS = {
    "gen-data": pipeline.cmd_gen_data,
    "train": pipeline.cmd_train,
    "train-ppnet": pipeline.cmd_train_ppnet,
    "explain": pipeline.cmd_explain,
    "evaluate": pipeline.cmd_evaluate,
    "rank": pipeline.cmd_rank,
    "report": pipeline.cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protosal", description="Saliency-vs-prototype evaluation pipeline.")
    p.add_argument("verb", choices=[*VERBS, "all"], help="pipeline stage to run ('all' runs every stage in order)")
    p.add_argument("--config", metavar="PATH", help="INI run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides [run] seed)")
    p.add_argument("--out", metavar="DIR", help="run directory (overrides [run] out)")
    p.add_argument("--jobs", type=int, help="worker processes (overrides [run] jobs)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    seed = cfg.run.seed if args.seed is None else args.seed
    cfg = cfg.with_seed(seed)
    run = cfg.run
    if args.out is not None:
        run = dataclasses.replace(run, out=args.out)
    if args.jobs is not None:
        run = dataclasses.replace(run, jobs=args.jobs)
    cfg.run = run
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        verbs = list(VERBS) if args.verb == "all" else [args.verb]
        for verb in verbs:
            VERBS[verb](cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingPrerequisite as err:
        print(f"missing prerequisite: {err}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDiverged, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
