"""Command line: ``run``, ``sweep`` and ``summarize``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import SWEEP_AXES, ConfigError, parse_config, run_experiment, summarize, sweep


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdpdfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override output_dir from the config")

    p = sub.add_parser("sweep", help="run one experiment per grid value")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma list; neighbor_cap: ints or M-1, mu_grid: numbers (full grid) or mu1:mu2 pairs")
    p.add_argument("--output-dir")

    p = sub.add_parser("summarize", help="rebuild summary.json/summary.txt from run directories")
    p.add_argument("--dir", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            out = run_experiment(parse_config(args.config), args.output_dir)
            print((out / "summary.txt").read_text(encoding="utf-8"), end="")
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            out = sweep(parse_config(args.config), args.axis, values, args.output_dir)
            print(out / "sweep.csv")
        else:
            summarize(args.dir)
            print(open(f"{args.dir}/summary.txt", encoding="utf-8").read(), end="")
    except (ConfigError, ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"kdpdfl: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
