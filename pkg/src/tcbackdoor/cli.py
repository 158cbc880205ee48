"""Command line entry point: ``python -m tcbackdoor <command> --config run.json``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation
from .pipeline import ConfigError, Pipeline, RunConfig, StageError, format_summary, summarize, write_summary


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    return cfg


def _report(args) -> int:
    if args.csv:
        paths = [Path(p) for p in args.csv]
    else:
        out = Path(args.out or _config(args).out)
        paths = sorted(out.glob("seed_*/results.csv")) + sorted(out.glob("seed_*/baseline.csv"))
        if not paths:
            raise StageError(f"[report] no per-seed results under {out}; run `evaluate` first")
    reports = [r for p in paths for r in evaluation.read_csv(p)]
    rows = summarize(reports)
    if args.summary:
        write_summary(rows, args.summary)
    elif not args.csv:
        write_summary(rows, Path(args.out or _config(args).out) / "summary.csv")
    print(format_summary(rows))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tcbackdoor", description="Clean-label temporal chrominance backdoor experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="run config JSON (defaults built in)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="run a single master seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("gen-data", "generate the synthetic train/test corpus")
    p = add("train", "train surrogate, identity and victim models")
    p.add_argument("--model", choices=["all", "surrogate", "identity", "clean", "victims"], default="all")
    add("plan", "choose poisoned samples for every (strategy, alpha) cell")
    add("poison", "apply the plans to the training set")
    add("evaluate", "score every victim; writes results.csv and baseline.csv")
    add("sweep", "all stages above for every seed")
    add("run", "sweep, then report")
    p = add("report", "mean and std over seeds")
    p.add_argument("csv", nargs="*", help="per-seed CSVs (default: <out>/seed_*/*.csv)")
    p.add_argument("--summary", help="write the summary CSV here")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    try:
        if args.command == "report":
            return _report(args)
        pipe = Pipeline(_config(args), out=args.out, jobs=args.jobs)
        if args.command == "gen-data":
            pipe.gen_data()
        elif args.command == "train":
            pipe.train(args.model)
        elif args.command == "plan":
            pipe.plan()
        elif args.command == "poison":
            pipe.poison()
        elif args.command == "evaluate":
            pipe.evaluate()
        elif args.command == "sweep":
            pipe.sweep()
        elif args.command == "run":
            _, _, summary = pipe.run()
            print(format_summary(summary))
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
