"""Command-line front end: run, partition, report.

``run`` simulates one configuration (file values overridable per flag) and
writes a run directory.  ``partition`` prints the router-to-worker map a
configuration would use, without running anything.  ``report`` compares run
directories against a sequential baseline and writes the summary tables and
figures.  Exit code 2 flags bad input, 1 a failed run.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import figures, report as report_mod
from .config import (LOOKAHEAD_MODES, PARTITION_METHODS, ParseError,
                     ValidationError, load_doc, materialize, parse_config)
from .runner import RunnerError, run


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqnet",
        description="Parallel quantum-network simulation runner.")
    commands = parser.add_subparsers(dest="command", required=True)

    run_cmd = commands.add_parser(
        "run", help="simulate one configuration and write a run directory")
    run_cmd.add_argument("config", help="configuration file (JSON)")
    run_cmd.add_argument("--workers", type=int, metavar="N",
                         help="override the worker count")
    run_cmd.add_argument("--seed", type=int, metavar="S",
                         help="override the global seed")
    run_cmd.add_argument("--partition", choices=sorted(PARTITION_METHODS),
                         metavar="M", help="override the partition method")
    run_cmd.add_argument("--lookahead", choices=sorted(LOOKAHEAD_MODES),
                         metavar="MODE", help="override the lookahead rule")
    run_cmd.add_argument("--no-batching", action="store_true",
                         help="send state-server requests one frame each")
    run_cmd.add_argument("--no-offload", action="store_true",
                         help="leave touched state on the server")
    run_cmd.add_argument("--dup-factor", type=int, metavar="K",
                         help="duplicate exchange records K times (0..8)")
    run_cmd.add_argument("--out", metavar="DIR",
                         help="run directory (default runs/<hash>-p<N>)")

    partition_cmd = commands.add_parser(
        "partition", help="print the router-to-worker map and stop")
    partition_cmd.add_argument("config", help="configuration file (JSON)")

    report_cmd = commands.add_parser(
        "report", help="compare run directories against a baseline")
    report_cmd.add_argument("runs", nargs="+", metavar="DIR",
                            help="run directories to compare")
    report_cmd.add_argument("--baseline", required=True, metavar="DIR",
                            help="sequential run directory of the same config")
    report_cmd.add_argument("--out", default=".", metavar="DIR",
                            help="where to write summary files (default .)")
    return parser


def _apply_overrides(doc: dict, args: argparse.Namespace) -> dict:
    if args.workers is not None:
        doc["workers"] = args.workers
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.partition is not None:
        doc.setdefault("partition", {})["method"] = args.partition
    if args.lookahead is not None:
        doc["lookahead"] = args.lookahead
    features = doc.setdefault("features", {})
    if args.no_batching:
        features["batching"] = False
    if args.no_offload:
        features["offloading"] = False
    if args.dup_factor is not None:
        features["duplication_factor"] = args.dup_factor
    return doc


def _cmd_run(args: argparse.Namespace) -> int:
    doc = _apply_overrides(load_doc(args.config), args)
    config = parse_config(doc)
    result = run(config)
    out_dir = args.out or f"runs/{result['config_hash'][:12]}-p{config.workers}"
    paths = report_mod.write_run_dir(result, out_dir)
    flows = ", ".join(
        f"flow {flow}: {data['delivered']}"
        for flow, data in result["deliveries"].items()) or "none"
    print(f"{result['config_hash'][:12]} {result['mode']} p={result['workers']} "
          f"events={result['events_executed']} "
          f"wall={result['wall_seconds']:.3f}s")
    print(f"delivered pairs: {flows}")
    print(f"wrote {paths['report']} and {paths['workers']}")
    return 0


def _cmd_partition(args: argparse.Namespace) -> int:
    config = parse_config(load_doc(args.config))
    materials = materialize(config)
    print(json.dumps({"workers": config.workers,
                      "method": config.partition.method,
                      "map": dict(materials.pmap.assignment)}, indent=2))
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    baseline = report_mod.read_run_dir(args.baseline)
    runs = [report_mod.read_run_dir(path) for path in args.runs]
    summary = report_mod.compare(runs, baseline)
    paths = report_mod.write_comparison(summary, args.out)
    rendered = figures.render_all(summary, args.out)
    for entry in summary["entries"]:
        match = "ok" if entry["results_match"] else "MISMATCH"
        print(f"p={entry['workers']:<3} wall={entry['wall_seconds']:.3f}s "
              f"speedup={entry['speedup']:.2f} "
              f"efficiency={entry['efficiency']:.2f} results={match}")
    written = [paths["summary"], paths["comparison"], *rendered]
    print("wrote " + ", ".join(str(path) for path in written))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "partition":
            return _cmd_partition(args)
        return _cmd_report(args)
    except (ParseError, ValidationError, OSError,
            report_mod.MismatchedConfig, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RunnerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for worker, trace in sorted(exc.failures.items()):
            print(f"--- worker {worker} ---\n{trace}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
