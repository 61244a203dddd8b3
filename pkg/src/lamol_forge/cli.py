"""Command-line entry point: run, resume, render, inspect, verify."""

import argparse
import sys

from .charts import ChartError, render_curves
from .experiment import (
    ConfigError,
    inspect_pseudo,
    run_experiment,
    verify_manifest,
)


def _parse_seeds(text):
    parts = text.replace(",", " ").split()
    if not parts:
        raise argparse.ArgumentTypeError("seed list is empty")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lamol-forge",
        description="Lifelong language learning experiments with generative replay.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (
        ("run", "run every experiment in a config file"),
        ("resume", "re-run a config, skipping completed runs"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", help="output directory (overrides config and env)")
        p.add_argument("--seeds", type=_parse_seeds, help="seed list, e.g. '1 2 3'")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker count")

    p = sub.add_parser("render", help="render metric CSVs to SVG learning curves")
    p.add_argument("csv", nargs="+", help="metrics.csv files")
    p.add_argument("--out", required=True, help="directory for the SVG files")

    p = sub.add_parser("inspect", help="print pseudo-sample dumps with parse details")
    p.add_argument("dump", help="pseudo-sample TSV dump")
    p.add_argument("-n", type=int, default=20, help="how many samples to show")

    p = sub.add_parser("verify", help="re-hash artifacts against the run manifest")
    p.add_argument("out", help="output directory holding manifest.json")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command in ("run", "resume"):
            if args.jobs < 1:
                parser.error("--jobs must be >= 1")
            return run_experiment(
                args.config,
                out_override=args.out,
                seeds_override=args.seeds,
                jobs=args.jobs,
                resume=args.command == "resume",
            )
        if args.command == "render":
            paths = render_curves(args.csv, args.out)
            for path in paths:
                print(path)
            return 0
        if args.command == "inspect":
            print(inspect_pseudo(args.dump, args.n))
            return 0
        if args.command == "verify":
            problems = verify_manifest(args.out)
            if problems:
                for problem in problems:
                    print(problem, file=sys.stderr)
                return 1
            print("manifest verified: all artifact hashes match")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ChartError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    parser.error(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
