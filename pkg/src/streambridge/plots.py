"""Figure rendering for run reports. All figures are written as SVG."""

from __future__ import annotations

import math
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .core import parse_stream_key  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "streambridge",
}


def _stream_order(key: str):
    try:
        name, rank = parse_stream_key(key)
        return (name, rank)
    except ValueError:
        return (key, -1)


def grid_shape(n: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(n))
    return math.ceil(n / cols), cols


def plot_stability(rows, path) -> Path:
    """One panel per stream: stability metric against the last analyzed step."""
    series = defaultdict(list)
    for row in rows:
        if row.status == "ok" and row.stability_metric is not None:
            series[row.stream_key].append((row.window_hi, row.stability_metric))
    keys = sorted({row.stream_key for row in rows}, key=_stream_order)
    nrows, ncols = grid_shape(len(keys))
    path = Path(path)
    with plt.rc_context(RC):
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(2.2 * ncols, 1.7 * nrows), squeeze=False, sharex=True
        )
        for ax in axes.flat[len(keys):]:
            ax.set_visible(False)
        for ax, key in zip(axes.flat, keys):
            pts = sorted(series.get(key, []))
            if pts:
                ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.0, marker=".", ms=3)
            else:
                ax.text(0.5, 0.5, "no result", ha="center", va="center", transform=ax.transAxes)
            ax.set_title(key)
            ax.set_ylim(bottom=0)
        for col in range(ncols):
            # bottom-most visible panel per column carries the x axis
            visible = [axes[r, col] for r in range(nrows) if r * ncols + col < len(keys)]
            if visible:
                visible[-1].xaxis.set_tick_params(labelbottom=True)
                visible[-1].set_xlabel("step")
        for ax in axes[:, 0]:
            ax.set_ylabel("mean (|λ|-1)²")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def plot_scaling(summaries, path) -> Path:
    """Throughput and latency against rank count, one point per run."""
    pts = sorted(summaries, key=lambda s: s["ranks"])
    ranks = [s["ranks"] for s in pts]
    path = Path(path)
    with plt.rc_context(RC):
        fig, (ax_lat, ax_tp) = plt.subplots(1, 2, figsize=(7, 2.8))
        ax_lat.plot(ranks, [s["latency_s"]["p50"] for s in pts], marker="o", label="p50")
        ax_lat.plot(ranks, [s["latency_s"]["p95"] for s in pts], marker="s", label="p95")
        ax_lat.set_xlabel("simulation ranks")
        ax_lat.set_ylabel("latency (s)")
        ax_lat.set_ylim(bottom=0)
        ax_lat.legend(frameon=False)
        ax_tp.plot(ranks, [s["throughput"]["bytes_per_s"] / 1e6 for s in pts], marker="o")
        ax_tp.set_xlabel("simulation ranks")
        ax_tp.set_ylabel("aggregate throughput (MB/s)")
        ax_tp.set_ylim(bottom=0)
        for ax in (ax_lat, ax_tp):
            ax.set_xticks(ranks)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
