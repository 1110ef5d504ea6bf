"""Command-line entry point: ``pvhost {allocate,size,hosting,zonal,report}``.

Exit codes: 0 success, 1 usage error, 2 input or artifact error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Sequence

from .feeder import FeederError
from .hosting import StudyError, Strategy
from .loads import AllocationError, LoadDataError
from .pipeline import (ArtifactError, ConfigError, load_config, run_allocate, run_hosting,
                       run_report, run_size, run_zonal)
from .powerflow import ConvergenceError
from .sizing import TariffError

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise _UsageError(f"{self.prog}: error: {message}")


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="StudyConfig JSON file")
    common.add_argument("--seed", type=_u64, help="study seed (overrides the config)")
    common.add_argument("--workers", type=_positive, help="worker processes")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    p = _Parser(prog="pvhost", description="Stochastic PV hosting-capacity studies.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("allocate", parents=[common], help="allocate house profiles to load nodes")
    sub.add_parser("size", parents=[common], help="optimal PV size for every allocated house")
    for name, text in (("hosting", "stochastic hosting-capacity study"),
                       ("zonal", "per-zone voltage-change study")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--strategy", action="append", choices=[s.value for s in Strategy],
                        help="restrict to this strategy (repeatable)")
        sp.add_argument("--fixed-kw", type=float, help="size used by the fixed strategy")
        if name == "hosting":
            sp.add_argument("--scenarios", type=_positive, help="override M")
    sub.add_parser("report", parents=[common], help="hosting-capacity table and zonal summary")
    return p


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    # subparser defaults shadow values given before the subcommand
    head = list(argv)[:list(argv).index(args.command)]
    if head:
        pre, _ = _common().parse_known_args(head)
        for key in ("config", "seed", "workers", "out"):
            if getattr(args, key) is None:
                setattr(args, key, getattr(pre, key))
        args.verbose = args.verbose or pre.verbose
    return args


def _run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out, workers=args.workers)
    if getattr(args, "fixed_kw", None) is not None:
        cfg = replace(cfg, stochastic=replace(cfg.stochastic, fixed_kw=args.fixed_kw))
    if getattr(args, "scenarios", None) is not None:
        cfg = replace(cfg, stochastic=replace(cfg.stochastic, m_scenarios=args.scenarios))
    cmd = args.command
    if cmd == "allocate":
        summary = run_allocate(cfg)
        print(f"allocated {summary['n_houses']} houses on {summary['n_nodes']} load nodes; "
              f"feeder peak {summary['feeder_peak_kw']:.1f} kW")
    elif cmd == "size":
        summary = run_size(cfg)
        print(f"sized {summary['n_houses']} houses ({summary['n_profiles']} distinct profiles); "
              f"total optimal PV {summary['total_kw']:.1f} kW")
    elif cmd == "hosting":
        rows = run_hosting(cfg, args.strategy)
        _print_table(rows)
    elif cmd == "zonal":
        result = run_zonal(cfg, args.strategy)
        for r in result.records:
            print(f"zone {r.zone:>3} {r.strategy:<8} {r.resolution_s:>5} s  "
                  f"delta_v {r.delta_v_pu:+.5f} pu")
    else:
        report = run_report(cfg)
        _print_table(report["table"])
    return EXIT_OK


def _print_table(rows) -> None:
    for row in rows:
        cells = [f"{k}={v:.1f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()]
        print("  ".join(cells))


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except StudyError as exc:
        coords = {"scenario": exc.scenario, "step": exc.step_index, "timestep": exc.timestep,
                  "zone": exc.zone}
        print(f"solver failure: {exc} {json.dumps({k: v for k, v in coords.items() if v is not None})}",
              file=sys.stderr)
        return EXIT_NUMERIC
    except ConvergenceError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ArtifactError, FeederError, LoadDataError, AllocationError,
            TariffError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
