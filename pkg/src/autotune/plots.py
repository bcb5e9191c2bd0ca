"""Report figures written next to the CSV outputs (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def figure_path(csv_path) -> Path:
    """``metrics.csv`` -> ``metrics.png`` in the same directory."""
    return Path(csv_path).with_suffix(".png")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def plot_metrics(rows: list, path) -> Path:
    """Training and validation RMSE in cents against step, with the learning rate below."""
    steps = np.array([r.step for r in rows])
    train = 100.0 * np.sqrt(np.array([r.train_mse_norm for r in rows], dtype=float))
    val = np.array([r.val_rmse_cents for r in rows], dtype=float)
    lr = np.array([r.lr for r in rows], dtype=float)

    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 5), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(steps, train, "o-", ms=3, label="train (running)")
    ax.plot(steps, val, "s-", ms=3, label="validation")
    ax.set_ylabel("RMSE (cents)")
    ax.set_yscale("log")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    ax_lr.step(steps, lr, where="post", color="0.3")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("step")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_corrections(track, path, sample_rate: int, reference=None, title: str | None = None) -> Path:
    """Per-frame corrections, voiced frames only; ``reference`` (cents) is drawn for comparison."""
    t = np.arange(len(track)) * track.hop / sample_rate
    cents = np.where(track.voiced, track.cents, np.nan)
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(t, cents, lw=1.2, label="correction")
    if reference is not None:
        ref = np.where(track.voiced, np.asarray(reference, dtype=float), np.nan)
        ax.plot(t, ref, lw=1.0, ls="--", color="k", label="reference")
        ax.legend()
    ax.axhline(0.0, color="0.6", lw=0.8)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("cents")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_example(example, path, sample_rate: int, hop: int) -> Path:
    """Stacked feature matrix of one training example with its labels underneath."""
    feats = example.features
    n = feats.shape[0]
    extent = (0.0, n * hop / sample_rate, 0, feats.shape[1])
    fig, (ax, ax_lab) = plt.subplots(2, 1, figsize=(8, 6), sharex=True, gridspec_kw={"height_ratios": [3, 1]})
    ax.imshow(feats.T, origin="lower", aspect="auto", extent=extent, cmap="magma", vmin=0.0, vmax=1.0)
    ax.axhline(example.accomp_bins, color="w", lw=0.8, ls=":")
    ax.set_ylabel("bin (accompaniment | vocal)")
    t = np.arange(n) * hop / sample_rate
    ax_lab.plot(t, np.where(example.mask, example.labels, np.nan), lw=1.2)
    ax_lab.set_ylim(-1.1, 1.1)
    ax_lab.set_xlabel("time (s)")
    ax_lab.set_ylabel("label")
    ax_lab.grid(True, alpha=0.3)
    return _save(fig, path)
