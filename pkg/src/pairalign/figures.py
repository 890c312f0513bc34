"""Static figure emission (matplotlib Agg). Every figure also gets its data
written as a plain CSV next to the image so results stay inspectable."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

MODALITY_COLORS = {"he": "#b1467e", "sim": "#2c8a5b"}


def save_projection_figure(coords: np.ndarray, modalities: list[str], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["x", "y", "modality"])
        for (x, y), m in zip(coords, modalities):
            writer.writerow([repr(float(x)), repr(float(y)), m])
    fig, ax = plt.subplots(figsize=(5, 5))
    for modality in sorted(set(modalities)):
        sel = np.array([m == modality for m in modalities])
        ax.scatter(coords[sel, 0], coords[sel, 1], s=6, alpha=0.6,
                   label=modality, color=MODALITY_COLORS.get(modality))
    ax.legend()
    ax.set_xlabel("dim 1")
    ax.set_ylabel("dim 2")
    ax.set_title("2-D projection of frozen embeddings")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_trace_figure(trace_csv, path) -> None:
    path = Path(path)
    rows = list(csv.DictReader(open(trace_csv)))
    if not rows:
        return
    steps = np.array([int(r["step"]) for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    for column in ("l_dino", "l_domain", "l_contrast", "l_recon", "l_total"):
        vals = np.array([float(r[column]) for r in rows])
        ax.plot(steps, vals, label=column, linewidth=1)
    stages = np.array([int(r["stage"]) for r in rows])
    for boundary in steps[np.flatnonzero(np.diff(stages)) + 1]:
        ax.axvline(boundary, color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_figure(table: list[dict], metric: str, path) -> None:
    from .experiment import ABLATION_ROWS, median_by_row

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    medians = median_by_row(table, metric)
    names = [n for n in ABLATION_ROWS if n in medians]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(names)), [medians[n] for n in names], color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(f"median {metric}")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confusion_figure(matrix: np.ndarray, path, labels=("neg", "pos")) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(matrix, cmap="Blues")
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(int(matrix[i, j])), ha="center", va="center")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
