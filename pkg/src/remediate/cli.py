"""``remediate`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys

from . import runner
from .classifier import ModelError
from .data_model import DataError
from .decision import PolicyError
from .engine import ConfigError
from .metrics import MetricError
from .spatial_bayes import PoolingError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3

COMMANDS = {
    "generate": "write a synthetic city (parcels.csv, observations.csv) and its crosstab",
    "evaluate": "holdout AUROC, ROC, calibration and learning curves for the hazard model",
    "backtest": "run the inspect-then-replace loop against a fully labeled dataset",
    "simulate": "run the loop in a KNN-propagated generative city",
    "report": "compare policies against a named baseline over replicated backtests",
}


def _truncate(text: str) -> tuple[int, int]:
    try:
        n_slr, n_hvi = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected <n_slr>,<n_hvi>, e.g. 4500,2250") from None
    if n_slr < 0 or n_hvi < 0:
        raise argparse.ArgumentTypeError("visit limits must be non-negative")
    return n_slr, n_hvi


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remediate", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=0, help="single seed for all randomness")
        p.add_argument("--out", default="remediate-out", help="output directory for the report bundle")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="format for tables and curves")
        p.add_argument("--truncate-visits", type=_truncate, metavar="N_SLR,N_HVI",
                       help="summarise only the first N_SLR replacement visits and N_HVI inspections")
    return parser


def run(args: argparse.Namespace) -> runner.Bundle:
    doc = runner.load_config(args.config) if args.config else {}
    if args.command == "generate":
        return runner.generate(doc, args.seed)
    if args.command == "evaluate":
        return runner.evaluate(doc, args.seed)
    workflow = {"backtest": runner.backtest, "simulate": runner.simulate, "report": runner.report}
    return workflow[args.command](doc, args.seed, args.truncate_visits)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        bundle = run(args)
        runner.write_bundle(bundle, args.out, args.format)
    except (ConfigError, PolicyError, PoolingError, ModelError, MetricError) as exc:
        print(f"remediate: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"remediate: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
