"""Figure rendering for the report paths.

Every function takes plain arrays plus an output path and writes a PNG,
returning the path. Rendering always uses the Agg backend so commands work
headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.autolayout": True,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_training_curves(history: list[dict], path) -> Path:
    epochs = [h["epoch"] for h in history if "epoch" in h]
    train = [h["train_loss"] for h in history if "epoch" in h]
    cv = [h["train_cv"] for h in history if "epoch" in h]
    val = [h.get("val_traj") for h in history if "epoch" in h]
    with plt.rc_context(_RC):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        ax1.plot(epochs, train, label="train loss")
        if any(v is not None for v in val):
            ax1.plot(epochs, val, label="val trajectory loss")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.set_yscale("log")
        ax1.legend()
        ax2.plot(epochs, cv, color="tab:orange")
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("router CV loss")
        ax1.set_title("training")
        ax2.set_title("expert balance")
    return _save(fig, path)


def plot_trajectories(records: list[dict], path, max_panels: int = 6) -> Path:
    """records: dicts with battery_id, future_cycle, predicted, actual arrays."""
    records = records[:max_panels]
    n = max(len(records), 1)
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(
            nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), squeeze=False
        )
        for ax in axes.flat[n:]:
            ax.axis("off")
        for ax, rec in zip(axes.flat, records):
            ax.plot(rec["future_cycle"], rec["predicted"], "r-", lw=1.2, label="predicted")
            actual = rec.get("actual")
            if actual is not None and len(actual):
                ax.plot(rec["future_cycle"][: len(actual)], actual, "k.", ms=3, label="actual")
            ax.set_title(str(rec["battery_id"]))
            ax.set_xlabel("cycle")
            ax.set_ylabel("capacity (mAh)")
            ax.legend()
    return _save(fig, path)


def plot_condition_metrics(tags: list[str], mape: list[float], path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(tags) + 1.5), 3.0))
        ax.bar(range(len(tags)), mape, color="tab:blue")
        ax.set_xticks(range(len(tags)))
        ax.set_xticklabels(tags, rotation=30, ha="right")
        ax.set_ylabel("MAPE (%)")
        ax.set_title("per-condition error")
    return _save(fig, path)


def plot_gate_heatmap(weights: np.ndarray, path, stage_labels=None) -> Path:
    """Per-sample expert weights (n, E) as a heatmap, samples on the x axis."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.5, 2.8))
        im = ax.imshow(weights.T, aspect="auto", cmap="viridis", interpolation="nearest")
        ax.set_xlabel("sample")
        ax.set_ylabel("expert")
        ax.set_yticks(range(weights.shape[1]))
        ax.set_yticklabels([f"E{j + 1}" for j in range(weights.shape[1])])
        fig.colorbar(im, ax=ax, label="gate weight")
        ax.set_title("degradation router weights")
    return _save(fig, path)


def plot_tsne(embedding: np.ndarray, stages, path) -> Path:
    colors = {"early": "tab:green", "mid": "tab:orange", "late": "tab:red"}
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.6))
        stages = np.asarray(stages)
        for stage in ("early", "mid", "late"):
            mask = stages == stage
            if mask.any():
                ax.scatter(
                    embedding[mask, 0], embedding[mask, 1],
                    s=8, label=stage, color=colors[stage], alpha=0.8,
                )
        ax.set_xlabel("dim 1")
        ax.set_ylabel("dim 2")
        ax.legend()
        ax.set_title("expert-weight embedding")
    return _save(fig, path)


def plot_trend_embeddings(matrix: np.ndarray, path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        im = ax.imshow(matrix, aspect="auto", cmap="magma", interpolation="nearest")
        ax.set_xlabel("future step")
        ax.set_ylabel("sample")
        fig.colorbar(im, ax=ax, label="normalized trend")
        ax.set_title("latent degradation trends")
    return _save(fig, path)


def plot_classification_counts(rows, path) -> Path:
    """rows: ConfidenceRow-like objects with label counts per SOH bucket."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        buckets = [str(r.soh_percent) for r in rows]
        exc = [r.n_excellent for r in rows]
        qua = [r.n_qualified for r in rows]
        scr = [r.n_scrap for r in rows]
        x = np.arange(len(rows))
        ax.bar(x, exc, label="Excellent", color="tab:green")
        ax.bar(x, qua, bottom=exc, label="Qualified", color="tab:orange")
        ax.bar(x, scr, bottom=np.array(exc) + np.array(qua), label="Scrap", color="tab:red")
        ax.set_xticks(x)
        ax.set_xticklabels([f"{b}% SOH" for b in buckets])
        ax.set_ylabel("batteries")
        ax.legend()
        ax.set_title("three-path classification")
    return _save(fig, path)
