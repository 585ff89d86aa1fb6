"""Run artifacts on disk: a structured summary plus delimited worker tables.

Two layers.  A run directory holds one run: ``report.json`` (the full run
report, minus any captured traces) and ``workers.csv`` (one row per worker,
fixed column order).  A comparison takes several run directories against a
sequential baseline of the same configuration and produces ``summary.json``
and ``comparison.csv`` with speedup and efficiency per worker count.  All
rows and columns are emitted in a deterministic order so artifacts diff
cleanly between runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

FORMAT_VERSION = 1

REPORT_FILE = "report.json"
WORKERS_FILE = "workers.csv"
SUMMARY_FILE = "summary.json"
COMPARISON_FILE = "comparison.csv"

WORKER_COLUMNS = (
    "worker", "events_executed", "windows", "span_seconds",
    "computing_seconds", "communicating_seconds", "waiting_seconds",
    "socket_seconds", "exchange_base_bytes", "exchange_dup_bytes",
    "qsm_local", "qsm_forwarded", "qsm_touch_transferred",
    "qsm_touch_transferred_local", "messages_to_server",
    "server_request_fraction",
)

COMPARISON_COLUMNS = (
    "workers", "mode", "wall_seconds", "speedup", "efficiency",
    "events_executed", "windows", "computing_seconds",
    "communicating_seconds", "waiting_seconds", "socket_seconds",
    "messages_to_server", "results_match",
)


class MismatchedConfig(ValueError):
    """Reports with different config hashes cannot be compared."""


def write_run_dir(report: dict, out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.json`` and ``workers.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slim = {key: value for key, value in report.items() if key != "traces"}
    slim["format_version"] = FORMAT_VERSION
    json_path = out / REPORT_FILE
    json_path.write_text(json.dumps(slim, indent=2, sort_keys=True) + "\n")
    csv_path = out / WORKERS_FILE
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(WORKER_COLUMNS)
        for row in report["per_worker"]:
            writer.writerow([row[column] for column in WORKER_COLUMNS])
    return {"report": json_path, "workers": csv_path}


def read_run_dir(path: str | Path) -> dict:
    """Load a run report from a directory (or a report file directly)."""
    source = Path(path)
    if source.is_dir():
        source = source / REPORT_FILE
    report = json.loads(source.read_text())
    version = report.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{source}: format version {version!r}, "
                         f"expected {FORMAT_VERSION}")
    return report


def _phase_sum(report: dict, field: str) -> float:
    return sum(row[field] for row in report["per_worker"])


def compare(reports: list[dict], baseline: dict) -> dict:
    """Speedup/efficiency of each report against the sequential baseline.

    The baseline appears as the first entry with speedup exactly 1.0.
    ``results_match`` records whether a report reproduced the baseline's
    event count, delivered pairs, and trace digest.
    """
    if baseline["workers"] != 1:
        raise MismatchedConfig(
            f"baseline must be a sequential run, got workers={baseline['workers']}")
    for report in reports:
        if report["config_hash"] != baseline["config_hash"]:
            raise MismatchedConfig(
                f"config hash {report['config_hash'][:12]} (p={report['workers']}) "
                f"differs from baseline {baseline['config_hash'][:12]}")
    base_wall = baseline["wall_seconds"]
    entries = []
    # Listing the baseline among the runs is natural CLI usage; don't let it
    # show up twice.  A distinct second sequential run still gets its row.
    others = [r for r in reports if r != baseline]
    ordered = [baseline] + sorted(others, key=lambda r: (r["workers"], r["mode"]))
    for report in ordered:
        speedup = base_wall / report["wall_seconds"]
        entries.append({
            "workers": report["workers"],
            "mode": report["mode"],
            "wall_seconds": report["wall_seconds"],
            "speedup": speedup,
            "efficiency": speedup / report["workers"],
            "events_executed": report["events_executed"],
            "windows": report["windows"],
            "computing_seconds": _phase_sum(report, "computing_seconds"),
            "communicating_seconds": _phase_sum(report, "communicating_seconds"),
            "waiting_seconds": _phase_sum(report, "waiting_seconds"),
            "socket_seconds": _phase_sum(report, "socket_seconds"),
            "messages_to_server": report["qsm"]["messages_to_server"],
            "results_match": (
                report["events_executed"] == baseline["events_executed"]
                and report["deliveries"] == baseline["deliveries"]
                and report["trace_digest"] == baseline["trace_digest"]),
        })
    return {"format_version": FORMAT_VERSION,
            "config_hash": baseline["config_hash"],
            "config": baseline["config"],
            "baseline_wall_seconds": base_wall,
            "deliveries": baseline["deliveries"],
            "entries": entries}


def write_comparison(summary: dict, out_dir: str | Path) -> dict[str, Path]:
    """Write ``summary.json`` and ``comparison.csv``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / SUMMARY_FILE
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    csv_path = out / COMPARISON_FILE
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(COMPARISON_COLUMNS)
        for entry in summary["entries"]:
            writer.writerow([entry[column] for column in COMPARISON_COLUMNS])
    return {"summary": json_path, "comparison": csv_path}
