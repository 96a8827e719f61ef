"""Matplotlib renderings of reports: attention strips, distance grids,
per-fold AUC charts. Output format follows the file extension (.svg, .png)."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

if TYPE_CHECKING:
    from .evaluate import MetricReport
    from .interpret import AttentionReport, SimilarityMatrix


def save_attention_heatmap(report: "AttentionReport", path: str | Path) -> None:
    """One-row strip, one cell per token, grayscale by attention score."""
    scores = np.asarray(report.per_token_scores, dtype=float)
    n = max(len(scores), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.45 * n), 1.9))
    ax.imshow(
        scores[None, :] if len(scores) else np.zeros((1, 1)),
        cmap="gray_r",
        aspect="auto",
        vmin=0.0,
    )
    ax.set_yticks([])
    ax.set_xticks(range(len(report.tokens)))
    ax.set_xticklabels(report.tokens, rotation=90, fontsize=7)
    ax.set_title(f"[CLS] attention ({report.aggregation})", fontsize=9)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_similarity_heatmap(matrix: "SimilarityMatrix", path: str | Path) -> None:
    """Grid heatmap of pairwise [CLS] embedding distances."""
    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    im = ax.imshow(matrix.distances, cmap="viridis")
    ax.set_xticks(range(len(matrix.values)))
    ax.set_yticks(range(len(matrix.values)))
    ax.set_xticklabels(matrix.values, rotation=90, fontsize=8)
    ax.set_yticklabels(matrix.values, fontsize=8)
    fig.colorbar(im, ax=ax, label="Euclidean distance")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_fold_auc_chart(report: "MetricReport", path: str | Path) -> None:
    """Bar per fold with the mean line and +-std band."""
    aucs = np.asarray(report.fold_aucs, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.bar(range(len(aucs)), aucs, color="#4878a8")
    ax.axhline(report.mean, color="#333333", linewidth=1.2, label="mean")
    if report.std > 0:
        ax.axhspan(
            report.mean - report.std,
            report.mean + report.std,
            color="#333333",
            alpha=0.12,
        )
    ax.set_xticks(range(len(aucs)))
    ax.set_xticklabels([f"fold {i}" for i in range(len(aucs))])
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("AUC")
    ax.set_title(f"{report.dataset} ({report.protocol})", fontsize=10)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
