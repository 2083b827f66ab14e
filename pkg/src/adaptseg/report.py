"""Delimited reports and matplotlib figures for training, evaluation and ablations."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("dice", "iou", "hd95")


def write_tsv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, delimiter="\t", extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in columns})
    return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_history(history: Sequence[dict], path) -> Path:
    """Training loss and held-out Dice per epoch."""
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.plot(epochs, [h["loss"] for h in history], marker=".")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax2.plot(epochs, [h["dice"] for h in history], marker=".", label="dice")
    ax2.plot(epochs, [h["iou"] for h in history], marker=".", label="iou")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_overlays(images: np.ndarray, masks: np.ndarray, preds: np.ndarray, prompts, path, titles=None) -> Path:
    """One panel per sample: the image (middle slice for volumes), truth contour, prediction and prompt."""
    n = len(images)
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 3 * rows), squeeze=False)
    for k, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if k >= n:
            continue
        d = images[k].shape[0] // 2
        ax.imshow(images[k][d, ..., 0], cmap="gray", vmin=0, vmax=1)
        ax.imshow(np.ma.masked_where(~preds[k][d], preds[k][d]), cmap="autumn", alpha=0.45)
        if masks[k][d].any():
            ax.contour(masks[k][d], levels=[0.5], colors="cyan", linewidths=1)
        ps = prompts[k]
        for c in ps.clicks:
            r, col = c.position[-2:]
            ax.plot(col, r, "o", color="lime" if c.label > 0 else "red", ms=5)
        if ps.box is not None:
            (r0, c0), (r1, c1) = ps.box.lo[-2:], ps.box.hi[-2:]
            ax.add_patch(plt.Rectangle((c0 - 0.5, r0 - 0.5), c1 - c0, r1 - r0, fill=False, color="yellow"))
        if titles:
            ax.set_title(titles[k], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def summarize(rows: Sequence[dict], key: str) -> list[dict]:
    """Mean and std of each metric per value of ``key`` (e.g. mode), first-seen order."""
    out = []
    for value in dict.fromkeys(r[key] for r in rows):
        sub = [r for r in rows if r[key] == value]
        row = {key: value, "runs": len(sub)}
        for m in METRICS:
            vals = np.array([r[m] for r in sub])
            row[m] = float(vals.mean())
            row[f"{m}_std"] = float(vals.std())
        out.append(row)
    return out


def plot_ablation(summary: Sequence[dict], key: str, path) -> Path:
    labels = [str(r[key]) for r in summary]
    fig, ax = plt.subplots(figsize=(1.4 * len(labels) + 2, 3.5))
    ax.bar(labels, [r["dice"] for r in summary], yerr=[r["dice_std"] for r in summary], capsize=4, color="steelblue")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    for i, r in enumerate(summary):
        ax.text(i, r["dice"] + 0.02, f"{r['dice']:.3f}", ha="center", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
