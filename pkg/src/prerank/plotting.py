"""Figures written next to the TSV reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import SEGMENTS  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_segment_hits(rows: Sequence, path, metric: str = "HITS@3") -> Path:
    """Grouped bars of ``metric`` per segment, one bar per variant."""
    rows = [r for r in rows if r.metric == metric]
    variants = list(dict.fromkeys(r.variant for r in rows))
    segments = [s for s in ("ALL",) + SEGMENTS if any(r.segment == s for r in rows)]
    value = {(r.variant, r.segment): r.value for r in rows}
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(segments))
    for i, v in enumerate(variants):
        ax.bar(x + i * width, [value.get((v, s), np.nan) for s in segments], width, label=v)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(segments)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_deltas(rows: Sequence, path, segment: str = "ALL") -> Path:
    """Relative change vs. the base variant for each metric, one bar group per variant."""
    rows = [r for r in rows if r.segment == segment and r.delta_vs_base == r.delta_vs_base]
    metrics = list(dict.fromkeys(r.metric for r in rows))
    variants = list(dict.fromkeys(r.variant for r in rows))
    delta = {(r.variant, r.metric): 100 * r.delta_vs_base for r in rows}
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(metrics))
    for i, v in enumerate(variants):
        ax.bar(x + i * width, [delta.get((v, m), np.nan) for m in metrics], width, label=v)
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(metrics, rotation=20, fontsize=8)
    ax.set_ylabel("change vs base (%)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_training_curve(history: Sequence, path) -> Path:
    steps = [h.step for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [h.loss for h in history], label="total", linewidth=1)
    ax.plot(steps, [h.loss_e for h in history], label="engagement", linewidth=1)
    ax2 = ax.twinx()
    ax2.plot(steps, [h.loss_s for h in history], label="in-batch softmax", color="tab:green", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2.set_ylabel("in-batch softmax loss")
    ax.legend(loc="upper left", fontsize=8)
    ax2.legend(loc="upper right", fontsize=8)
    return _save(fig, path)
