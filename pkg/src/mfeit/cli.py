"""Command line entry point.

Usage::

    mfeit run config.json [--out DIR] [--seed N] [--quiet]
    mfeit table1 config.json [--out DIR] [--seed N] [--quiet]

Exit status is 0 on success, 2 for invalid configuration or input, and 3 for
numerical failures (singular systems, non-finite iterates).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, MeshError, RankError, SolverError
from .experiment import ExperimentConfig, Table1Config, load_config, run_experiment, run_table1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfeit", description="Multifrequency EIT experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment"), ("table1", "run the mesh/noise/alpha grid")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="JSON config file")
        sp.add_argument("--out", help="output directory (default: config 'out' or ./out/<name>)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--quiet", action="store_true", help="print nothing on success")
    return p


def _summary(report: dict, command: str) -> str:
    if command == "table1":
        return json.dumps({"errors": report["errors"], "timing_ms": report["timing_ms"]})
    return json.dumps({"metrics": report["metrics"], "timing_ms": report["timing_ms"]})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        out = Path(args.out or raw.get("out") or Path("out") / raw.get("name", args.command))
        if args.command == "run":
            cfg = ExperimentConfig.from_dict(raw)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            report = run_experiment(cfg, out)
        else:
            cfg = Table1Config.from_dict(raw)
            if args.seed is not None:
                cfg = cfg.with_seed(args.seed)
            report = run_table1(cfg, out)
    except (ConfigError, MeshError, RankError) as exc:
        print(f"mfeit: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ArithmeticError, RuntimeError) as exc:
        print(f"mfeit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    if not args.quiet:
        print(f"wrote {out}")
        print(_summary(report, args.command))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
