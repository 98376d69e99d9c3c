"""Command-line entry point.

    ffum run <config.json> [--strict] [--out DIR] [--seed N]
    ffum sweep <config.json> --axis {method,forget_fraction,num_clients} --values a,b,c [--out DIR]

Exit codes: 0 success, 1 invalid configuration or usage, 2 a mandatory
ordering check failed under ``--strict``, 3 numeric failure (NaN/Inf).
``FFUM_THREADS`` caps how many clients train concurrently.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigurationError, IngestionError, UsageError
from .experiment import PhaseError, mandatory_failures, parse_axis_values, run_experiment, sweep
from .federation import default_workers

EXIT_OK, EXIT_CONFIG, EXIT_ORDERING, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffum", description="Federated unlearning via f-divergence min-max.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config", help="experiment config (JSON)")
    run.add_argument("--strict", action="store_true", help="exit 2 if an f-FUM ordering check fails")
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--seed", type=int, help="master seed (overrides seed)")

    sw = sub.add_parser("sweep", help="run a grid along one axis")
    sw.add_argument("config", help="experiment config (JSON)")
    sw.add_argument("--axis", required=True, choices=["method", "forget_fraction", "num_clients"])
    sw.add_argument("--values", required=True, help="comma-separated axis values")
    sw.add_argument("--out", help="output directory (overrides output_dir)")
    sw.add_argument("--seed", type=int, help="master seed (overrides seed)")
    return parser


def _err(msg: str) -> None:
    print(f"ffum: error: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.output_dir)
        workers = default_workers()
        if args.command == "run":
            report = run_experiment(cfg, out, workers=workers)
        else:
            values = parse_axis_values(args.axis, args.values.split(","), cfg)
            csv_path = out / f"sweep_{args.axis}.csv"
            _, failed = sweep(cfg, args.axis, values, csv_path, workers=workers)
            print(csv_path)
            if failed:
                _err(f"{failed} grid point(s) failed; see the status column")
                return EXIT_NUMERIC
            return EXIT_OK
    except (ConfigurationError, UsageError, IngestionError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except PhaseError as exc:
        _err(f"numeric failure in phase {exc}")
        return EXIT_NUMERIC

    print(out / "report.json")
    if args.strict:
        bad = mandatory_failures(report)
        if bad:
            for line in bad:
                _err(f"ordering check failed: {line}")
            return EXIT_ORDERING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
