"""Loss curves, ablation gap bars and probe tables as PNG files."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

log = logging.getLogger(__name__)

# no timestamps or version strings, so identical inputs give identical bytes
_PNG_METADATA = {"Software": None}


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return np.array([])
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_figure(metrics: Sequence[dict], window: int = 200):
    steps = [m["step"] for m in metrics]
    losses = [m["loss"] for m in metrics]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="loss")
    ma = moving_average(losses, window)
    if len(ma):
        ax.plot(steps[window - 1 :], ma, lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("multi-view InfoNCE")
    ax.legend()
    fig.tight_layout()
    return fig


def gap_figure(cells: Sequence[dict]):
    rows: dict[str, list[float]] = {}
    for c in cells:
        rows.setdefault(c["row"], []).append(c["invariance_gap"])
    names = list(rows)
    means = [float(np.mean(rows[n])) for n in names]
    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    ax.bar(range(len(names)), means, color="tab:blue")
    for i, n in enumerate(names):
        ax.scatter([i] * len(rows[n]), rows[n], color="k", s=10, zorder=3)
    ax.set_xticks(range(len(names)), names)
    ax.set_ylabel("invariance gap")
    fig.tight_layout()
    return fig


def probe_table_figure(cells: Sequence[dict]):
    text = [[c["row"], str(c["seed"]), f"{c['invariance_gap']:.3f}", f"{c['probe_accuracy']:.3f}"] for c in cells]
    fig, ax = plt.subplots(figsize=(6, 0.4 + 0.3 * len(text)), dpi=100)
    ax.axis("off")
    ax.table(cellText=text, colLabels=["row", "seed", "gap", "probe acc."], loc="center")
    fig.tight_layout()
    return fig


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def emit_plots(metrics: Sequence[dict], reports: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Write whichever plots the inputs support; returns the files written."""
    out = Path(out_dir)
    if not metrics and not reports:
        log.warning("no records to plot")
        return []
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if metrics:
        written.append(_save(loss_figure(metrics), out / "loss.png"))
    if reports:
        written.append(_save(gap_figure(reports), out / "ablation_gap.png"))
        written.append(_save(probe_table_figure(reports), out / "probe_table.png"))
    return written
