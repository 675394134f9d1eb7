"""Command-line entry point: ``mqme <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import pipeline as P
from .errors import MqmeError

SUBCOMMANDS = ("gen-data", "gen-feedback", "train-rep", "train-reward", "train-rl", "eval-reward",
               "report", "repro-fig1", "repro-table1", "repro-appendix-a")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mqme", description="Cross-embodiment reward learning from "
                                 "mixed-quality demonstrations, at desk scale.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON config tree; a run's config.json is accepted as is")
    ap.add_argument("--seed", type=_u64, help="master seed (default 0)")
    ap.add_argument("--out", default=None, help="parent directory of run directories (default ./runs)")
    ap.add_argument("--method", choices=P.PIPELINES, help="pipeline for single-method subcommands")
    ap.add_argument("--held-out", dest="held_out", help="held-out embodiment (default mediumstick)")
    ap.add_argument("--paper-scale", action="store_true", help="use the published full-scale hyperparameters as defaults")
    ap.add_argument("--runs", nargs="*", default=(), help="report: further run directories to aggregate")
    return ap


def config_from_args(args) -> P.ExperimentConfig:
    tree = P.load_config_file(args.config) if args.config else {}
    return P.ExperimentConfig.build(tree, method=args.method, seed=args.seed, out=args.out,
                                    held_out=args.held_out, paper_scale=args.paper_scale)


def dispatch(sub: str, cfg: P.ExperimentConfig, runs: Sequence[str] = ()):
    if sub == "gen-data":
        return P.gen_data(cfg)
    if sub == "gen-feedback":
        return [P.gen_feedback(cfg)]
    if sub == "train-rep":
        return [P.train_rep(cfg)]
    if sub == "train-reward":
        return [P.train_reward(cfg)]
    if sub == "train-rl":
        return [P.train_rl(cfg)]
    if sub == "eval-reward":
        return [P.eval_reward(cfg)]
    if sub == "report":
        return P.report(cfg, runs)
    if sub == "repro-fig1":
        return P.repro_fig1(cfg)
    if sub == "repro-table1":
        return [P.repro_table1(cfg)]
    return [P.repro_appendix_a(cfg)]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        outputs = dispatch(args.subcommand, cfg, args.runs)
    except MqmeError as exc:
        print(f"mqme {args.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for p in outputs:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
