"""Static figures for the experiment reports.

Every function renders to a file (Agg backend, no display) and returns
the written path, so figures land next to the CSVs they visualize.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from .augmenter import TraceRecord  # noqa: E402
from .experiments import GridReport, SweepReport  # noqa: E402

_DPI = 150


def _annotated_heatmap(ax: plt.Axes, matrix: np.ndarray, row_labels: Sequence[str],
                       col_labels: Sequence[str], fmt: str = "{:.3f}") -> None:
    masked = np.ma.masked_invalid(matrix)
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad("lightgray")
    image = ax.imshow(masked, cmap=cmap, aspect="auto")
    ax.set_xticks(range(len(col_labels)), labels=col_labels,
                  rotation=45, ha="right")
    ax.set_yticks(range(len(row_labels)), labels=row_labels)
    threshold = (masked.min() + masked.max()) / 2.0 if masked.count() else 0.0
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            value = matrix[i, j]
            if np.isnan(value):
                ax.text(j, i, "–", ha="center", va="center", color="black")
            else:
                color = "white" if value < threshold else "black"
                ax.text(j, i, fmt.format(value), ha="center", va="center",
                        color=color, fontsize=8)
    ax.figure.colorbar(image, ax=ax, shrink=0.8)


def save_grid_heatmap(report: GridReport, path: str | Path) -> Path:
    """Policy-grid heatmap: user policies x item policies, cell = test gap."""
    users, items, matrix = report.matrix()
    fig, ax = plt.subplots(figsize=(1.2 * len(items) + 3, 0.6 * len(users) + 2))
    _annotated_heatmap(ax, matrix, users, items)
    ax.set_xlabel("item policy")
    ax.set_ylabel("user policy")
    ax.set_title(f"group NDCG gap after augmentation ({report.model}, "
                 f"base {report.base_test_delta:.3f})")
    return _save(fig, path)


def save_overlap_heatmap(names: Sequence[str], matrix: np.ndarray,
                         path: str | Path, title: str = "sample overlap",
                         ) -> Path:
    """Jaccard similarity between policy samples as an annotated heatmap."""
    fig, ax = plt.subplots(figsize=(1.0 * len(names) + 3, 0.8 * len(names) + 2))
    _annotated_heatmap(ax, np.asarray(matrix, dtype=np.float64), names, names,
                       fmt="{:.2f}")
    ax.set_title(title)
    return _save(fig, path)


def save_sweep_curves(report: SweepReport, path: str | Path) -> Path:
    """One panel per sweep family: utility and gap against the fraction."""
    families = [f for f in ("user", "item")
                if any(r["family"] == f for r in report.rows)]
    fig, axes = plt.subplots(1, max(len(families), 1),
                             figsize=(5.5 * max(len(families), 1), 4),
                             squeeze=False)
    for ax, family in zip(axes[0], families):
        rows = [r for r in report.rows
                if r["family"] == family and r["status"] == "ok"]
        psi = [r["psi"] for r in rows]
        ax.plot(psi, [r["test_ndcg"] for r in rows], "o-", label="NDCG")
        ax.plot(psi, [r["test_delta"] for r in rows], "s--", label="gap")
        ax.set_xlabel(f"{family} sample fraction")
        ax.set_ylabel("test metric")
        ax.set_title(f"vary {family} fraction ({report.cell})")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.suptitle(f"sample-size trade-off ({report.model})")
    return _save(fig, path)


def save_trace_plot(trace: Sequence[TraceRecord], path: str | Path,
                    best_epoch: Optional[int] = None) -> Path:
    """Optimization trace: relaxed loss, exact validation gap, edge count."""
    epochs = [r.epoch for r in trace]
    fig, (ax_loss, ax_gap) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_loss.plot(epochs, [r.loss for r in trace], color="tab:blue",
                 label="relaxed loss")
    ax_loss.set_ylabel("relaxed loss")
    ax_loss.grid(True, alpha=0.3)
    ax_edges = ax_loss.twinx()
    ax_edges.plot(epochs, [r.n_edges for r in trace], color="tab:gray",
                  alpha=0.6, label="edges")
    ax_edges.set_ylabel("discretized edges")

    ax_gap.plot(epochs, [r.delta_ndcg_valid for r in trace], color="tab:red",
                label="validation gap")
    ax_gap.plot(epochs, [r.ndcg_valid for r in trace], color="tab:green",
                label="validation NDCG")
    if best_epoch is not None:
        ax_gap.axvline(best_epoch, color="black", linestyle=":",
                       label=f"best epoch {best_epoch}")
    ax_gap.set_xlabel("epoch")
    ax_gap.set_ylabel("exact validation metric")
    ax_gap.legend()
    ax_gap.grid(True, alpha=0.3)
    fig.suptitle("augmentation trace")
    return _save(fig, path)


def save_benchmark_bars(rows: Sequence[Mapping[str, Any]], path: str | Path,
                        ) -> Path:
    """Base-vs-augmented gap per model, annotated with significance stars."""
    usable = [r for r in rows if r.get("status") == "ok" and "aug_delta" in r]
    fig, ax = plt.subplots(figsize=(1.8 * max(len(usable), 1) + 3, 4))
    if usable:
        x = np.arange(len(usable))
        width = 0.38
        ax.bar(x - width / 2, [r["base_delta"] for r in usable], width,
               label="base", color="tab:gray")
        bars = ax.bar(x + width / 2, [r["aug_delta"] for r in usable], width,
                      label="augmented", color="tab:blue")
        for bar, row in zip(bars, usable):
            if row.get("significance"):
                ax.text(bar.get_x() + bar.get_width() / 2, bar.get_height(),
                        row["significance"], ha="center", va="bottom")
        ax.set_xticks(x, labels=[r["model"] for r in usable])
    ax.set_ylabel("group NDCG gap")
    ax.set_title("fairness gap before and after augmentation")
    ax.legend()
    return _save(fig, path)


def _save(fig: plt.Figure, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=_DPI)
    plt.close(fig)
    return out
