"""Command line entry point: ``redispatch-shapley run --case case9 --formulation dc``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .case_io import CaseFormatError
from .pipeline import RunConfig, StageError, emit_report, export_graph, run_pipeline
from .power_flow import PowerFlowError
from .shapley import MAX_PLAYERS, PlayerCapExceeded

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_PF = 3
EXIT_OPF = 4
EXIT_CAP = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="redispatch-shapley")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="allocate redispatch cost over congested lines")
    run.add_argument("--case", required=True, help="catalog name (case9, ...) or path to a .m/.json case")
    run.add_argument("--formulation", choices=["dc", "ac"], default="dc")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--max-players", type=int, default=MAX_PLAYERS)
    run.add_argument("--report", choices=["table", "json", "csv"], default="table")
    run.add_argument("--graph", type=Path, help="write a DOT rendering of the market-clearing flow")
    run.add_argument("--cache", type=Path, help="JSON file of characteristic values to resume from and update")
    run.add_argument("--no-warm-start", action="store_true")
    run.add_argument("--market-dispatch", choices=["case", "unconstrained_opf"], default="case")
    run.add_argument("-v", "--verbose", action="store_true", help="log solver iterations")
    return parser


def _exit_code(err: StageError) -> int:
    cause = err.__cause__
    if isinstance(cause, (CaseFormatError, FileNotFoundError, KeyError)) or err.stage == "load":
        return EXIT_PARSE
    if isinstance(cause, PowerFlowError) or err.stage == "power_flow":
        return EXIT_PF
    if isinstance(cause, PlayerCapExceeded):
        return EXIT_CAP
    return EXIT_OPF


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = RunConfig(
            case=args.case,
            formulation=args.formulation,
            workers=args.workers,
            max_players=args.max_players,
            warm_start=not args.no_warm_start,
            market_dispatch=args.market_dispatch,
            cache_path=args.cache,
        )
    except ValueError as err:
        parser.error(str(err))
    try:
        report = run_pipeline(cfg)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return _exit_code(err)
    sys.stdout.write(emit_report(report, args.report))
    if args.report == "json":
        sys.stdout.write("\n")
    if args.graph:
        art = report.artifacts
        args.graph.write_text(export_graph(art.network, art.power_flow, report.players))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
