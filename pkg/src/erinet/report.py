"""File writers for run outputs: delimited tables, JSON and matplotlib figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .model import EMOTIONS  # noqa: E402


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def write_json(path, doc) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def write_history(path, history: Sequence[dict]) -> Path:
    """Loss log with one row per epoch."""
    return write_csv(
        path,
        ["epoch", "step", "lr", "train_loss"],
        [[h["epoch"], h["step"], repr(h["lr"]), repr(h["train_loss"])] for h in history],
    )


def write_attention_csv(path, weights: np.ndarray) -> Path:
    return write_csv(path, ["frame_index", "weight"], [[i, repr(float(w))] for i, w in enumerate(weights)])


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_pcc(path, per_emotion: Sequence[float], title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(per_emotion)), per_emotion, color="tab:blue")
    ax.set_xticks(range(len(per_emotion)))
    ax.set_xticklabels(EMOTIONS[: len(per_emotion)], rotation=30, ha="right")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_ylabel("PCC")
    ax.set_title(title or f"mean PCC {np.mean(per_emotion):.3f}")
    fig.tight_layout()
    return _save(fig, path)


def plot_attention(path, weights: np.ndarray, events: Sequence[int] | None = None, title: str = "") -> Path:
    """Per-frame attention curve; planted event frames, when known, are marked."""
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(np.arange(len(weights)), weights, color="tab:red", lw=1.0)
    for t in events or ():
        ax.axvline(t, color="tab:gray", ls="--", lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("attention")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_history(path, history: Sequence[dict]) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([h["epoch"] for h in history], [h["train_loss"] for h in history], marker="o", ms=3, label="train loss")
    if any("val_mean_pcc" in h for h in history):
        ax2 = ax.twinx()
        ax2.plot([h["epoch"] for h in history if "val_mean_pcc" in h],
                 [h["val_mean_pcc"] for h in history if "val_mean_pcc" in h], color="tab:green", label="val PCC")
        ax2.set_ylabel("val mean PCC")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L2 loss")
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(path, labels: Sequence[str], scores: Sequence[float]) -> Path:
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(labels) + 1.5))
    y = np.arange(len(labels))
    ax.barh(y, scores, color="tab:purple")
    ax.set_yticks(y)
    ax.set_yticklabels(labels)
    ax.invert_yaxis()
    ax.set_xlabel("mean PCC")
    fig.tight_layout()
    return _save(fig, path)
