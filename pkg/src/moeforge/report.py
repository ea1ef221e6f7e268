"""Figure rendering for the report-producing subcommands.

Each renderer returns a matplotlib Figure; ``save_figure`` writes it next to
the machine-readable output.  The Agg backend is forced so figures render in
headless environments.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.figure import Figure
from matplotlib.patches import Patch

from .layout import LayoutPlan
from .metrics import BinaryMetrics

__all__ = [
    "layout_figure",
    "task_weight_figure",
    "binary_metrics_figure",
    "save_figure",
]

_DENSE_COLOR = "#4878a8"
_MOE_COLOR = "#d1615d"


def layout_figure(plan: LayoutPlan) -> Figure:
    """Stage x local-rank grid with layer ranges and per-rank expert ranges."""
    pp, width = plan.parallel.pp, plan.parallel.width
    fig, ax = plt.subplots(figsize=(max(6.0, pp * 0.45), max(3.5, width * 0.5)))
    for s in range(pp):
        color = _MOE_COLOR if s in plan.moe_stages else _DENSE_COLOR
        for j in range(width):
            ax.add_patch(
                plt.Rectangle((s, j), 0.92, 0.92, facecolor=color, edgecolor="white")
            )
    for s, (lo, hi) in enumerate(plan.stage_layers):
        label = f"{lo}" if hi - lo == 1 else f"{lo}-{hi - 1}"
        ax.text(s + 0.46, width + 0.15, label, ha="center", va="bottom", fontsize=7,
                rotation=90 if pp > 16 else 0)
    for j, (lo, hi) in enumerate(plan.expert_ranges):
        ax.text(pp + 0.15, j + 0.46, f"e{lo}-{hi - 1}", ha="left", va="center",
                fontsize=7)
    ax.set_xlim(-0.5, pp + 1.5)
    ax.set_ylim(-0.5, width + 1.2)
    ax.set_xlabel("pipeline stage")
    ax.set_ylabel("local rank (EP/DP)")
    ax.set_xticks(range(0, pp, max(1, pp // 16)))
    ax.set_yticks(range(width))
    m = plan.model
    ax.set_title(
        f"{m.num_layers} layers ({m.num_dense_layers} dense), "
        f"{m.num_routed_experts} experts on {pp}x{width} ranks"
    )
    ax.legend(
        handles=[
            Patch(facecolor=_DENSE_COLOR, label="dense-only stage"),
            Patch(facecolor=_MOE_COLOR, label="MoE stage"),
        ],
        loc="lower right",
        fontsize=7,
    )
    fig.tight_layout()
    return fig


def task_weight_figure(
    lambdas: Mapping[str, float], instance_weights: Mapping[str, float] | None = None
) -> Figure:
    """Per-task weight bars, optionally beside an instance-weight histogram."""
    panels = 2 if instance_weights else 1
    fig, axes = plt.subplots(1, panels, figsize=(4.5 * panels, 3.5), squeeze=False)
    ax = axes[0][0]
    tasks = sorted(lambdas)
    ax.bar(range(len(tasks)), [lambdas[t] for t in tasks], color=_DENSE_COLOR)
    ax.set_xticks(range(len(tasks)))
    ax.set_xticklabels(tasks, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("task weight")
    ax.set_title("per-task weights")
    if instance_weights:
        ax2 = axes[0][1]
        ax2.hist(list(instance_weights.values()), bins=20, color=_MOE_COLOR)
        ax2.set_xlabel("instance weight")
        ax2.set_ylabel("samples")
        ax2.set_title("instance-weight distribution")
    fig.tight_layout()
    return fig


def binary_metrics_figure(metrics: BinaryMetrics, title: str = "") -> Figure:
    """Bar chart of the percentage metric suite."""
    values = metrics.as_dict(rounded=False)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    names = list(values)
    ax.bar(range(len(names)), [values[n] for n in names], color=_DENSE_COLOR)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 105)
    ax.set_ylabel("percent")
    if title:
        ax.set_title(title)
    for i, n in enumerate(names):
        ax.text(i, values[n] + 1, f"{values[n]:.2f}", ha="center", fontsize=6)
    fig.tight_layout()
    return fig


def save_figure(fig: Figure, path: str | os.PathLike, dpi: int = 150) -> None:
    """Render to a temp file and rename, so partial images never land."""
    target = Path(path)
    fmt = target.suffix.lstrip(".") or "png"
    fd, tmp = tempfile.mkstemp(dir=target.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            fig.savefig(f, dpi=dpi, format=fmt)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)
