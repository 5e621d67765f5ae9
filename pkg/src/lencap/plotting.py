"""PNG figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamp / version chunk, so identical data gives identical bytes
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)


def plot_loss_curve(curve, path) -> None:
    steps = [c[0] for c in curve]
    loss = [c[1] for c in curve]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, loss, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    _save(fig, path)


def plot_compliance(rows, path) -> None:
    ks = [r.length for r in rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.bar(ks, [r.accuracy for r in rows])
    a1.set_ylim(0, 1)
    a1.set_xlabel("target length")
    a1.set_ylabel("exact-length accuracy")
    a2.plot(ks, [r.mean_length for r in rows], "o-", label="predicted")
    a2.plot(ks, ks, "k--", lw=0.8, label="target")
    a2.set_xlabel("target length")
    a2.set_ylabel("mean words")
    a2.legend()
    _save(fig, path)


def plot_dense_grid(result, path) -> None:
    cfg = result.config
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    im = ax.imshow(result.grid, vmin=0, vmax=1, cmap="viridis")
    ax.set_xticks(range(len(cfg.sim_thresholds)), [f"{t:g}" for t in cfg.sim_thresholds])
    ax.set_yticks(range(len(cfg.iou_thresholds)), [f"{t:g}" for t in cfg.iou_thresholds])
    ax.set_xlabel("token-F1 threshold")
    ax.set_ylabel("IoU threshold")
    for (i, j), v in np.ndenumerate(result.grid):
        ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=7,
                color="white" if v < 0.5 else "black")
    ax.set_title(f"mAP {result.mean_ap:.3f}")
    fig.colorbar(im, ax=ax)
    _save(fig, path)


def plot_confusion(result, classes, path) -> None:
    n = len(classes)
    mat = np.zeros((n, n), dtype=int)
    for t, p in zip(result.truth, result.predicted):
        mat[t, p] += 1
    fig, ax = plt.subplots(figsize=(5, 4.2))
    ax.imshow(mat, cmap="Blues")
    ax.set_xticks(range(n), classes, rotation=45)
    ax.set_yticks(range(n), classes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for (i, j), v in np.ndenumerate(mat):
        ax.text(j, i, str(v), ha="center", va="center", fontsize=7)
    _save(fig, path)


def plot_attribute_accuracy(scores: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(scores), list(scores.values()))
    ax.set_ylim(0, 1)
    ax.set_ylabel("accuracy")
    _save(fig, path)


def plot_length_histogram(hist: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.bar(list(hist), list(hist.values()))
    ax.set_xlabel("caption length")
    ax.set_ylabel("triplets")
    _save(fig, path)
