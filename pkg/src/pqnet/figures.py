"""Comparison figures rendered to files next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

DECOMPOSITION_FILE = "time_decomposition.png"
SPEEDUP_FILE = "speedup.png"

_PHASES = (("computing_seconds", "computing"),
           ("communicating_seconds", "exchange"),
           ("waiting_seconds", "waiting"),
           ("socket_seconds", "state server"))


def render_decomposition(summary: dict, path: str | Path) -> Path:
    """Stacked per-phase wall time, one bar per worker count."""
    entries = summary["entries"]
    labels = [f"p={entry['workers']}" for entry in entries]
    figure, axes = plt.subplots(figsize=(1.2 + 1.1 * len(entries), 4.0))
    bottoms = [0.0] * len(entries)
    for field, label in _PHASES:
        values = [entry[field] for entry in entries]
        axes.bar(labels, values, bottom=bottoms, label=label, width=0.6)
        bottoms = [b + v for b, v in zip(bottoms, values)]
    axes.set_ylabel("seconds (summed over workers)")
    axes.set_title("run time decomposition")
    axes.legend(frameon=False)
    figure.tight_layout()
    target = Path(path)
    figure.savefig(target, dpi=120)
    plt.close(figure)
    return target


def render_speedup(summary: dict, path: str | Path) -> Path:
    """Speedup and efficiency against worker count, with the ideal line."""
    entries = sorted(summary["entries"], key=lambda e: e["workers"])
    workers = [entry["workers"] for entry in entries]
    speedup = [entry["speedup"] for entry in entries]
    efficiency = [entry["efficiency"] for entry in entries]
    figure, axes = plt.subplots(figsize=(5.0, 4.0))
    axes.plot(workers, workers, linestyle="--", color="gray", label="ideal")
    axes.plot(workers, speedup, marker="o", label="speedup")
    axes.set_xlabel("workers")
    axes.set_ylabel("speedup")
    axes.set_xticks(workers)
    twin = axes.twinx()
    twin.plot(workers, efficiency, marker="s", color="tab:green",
              label="efficiency")
    twin.set_ylabel("efficiency")
    twin.set_ylim(0.0, 1.1)
    lines, labels = axes.get_legend_handles_labels()
    twin_lines, twin_labels = twin.get_legend_handles_labels()
    axes.legend(lines + twin_lines, labels + twin_labels, frameon=False,
                loc="upper left")
    figure.tight_layout()
    target = Path(path)
    figure.savefig(target, dpi=120)
    plt.close(figure)
    return target


def render_all(summary: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [render_decomposition(summary, out / DECOMPOSITION_FILE),
            render_speedup(summary, out / SPEEDUP_FILE)]
