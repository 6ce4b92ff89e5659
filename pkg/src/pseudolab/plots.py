"""Static figure rendering for run reports (written next to the CSV output)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_metrics(csv_path):
    with open(csv_path, newline="") as f:
        rows = list(csv.DictReader(f))
    return rows


def _column(rows, name, cast=float):
    pairs = [(int(r["step"]), cast(r[name])) for r in rows if r.get(name, "") != ""]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def plot_loss_curves(csv_path, out_path) -> Path:
    rows = _read_metrics(csv_path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name, label in (("loss_total", "total"), ("loss_sup", "supervised"),
                        ("loss_unsup", "unsupervised"), ("loss_kl", "kl")):
        steps, values = _column(rows, name)
        if values and any(v != 0 for v in values):
            ax.plot(steps, values, label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_threshold_trajectory(csv_path, out_path) -> Path | None:
    """Sampled-threshold-vs-step plot; None when the run logged no thresholds."""
    rows = _read_metrics(csv_path)
    steps, values = _column(rows, "sampled_T")
    if not values:
        return None
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, values, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("sampled threshold")
    ax.set_ylim(0.0, 1.0)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_validation_iou(csv_path, out_path) -> Path | None:
    rows = _read_metrics(csv_path)
    steps, values = _column(rows, "val_iou")
    if not values:
        return None
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(steps, values, marker="o", markersize=3, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("validation IoU")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_sweep(table: dict, xlabel: str, out_path) -> Path:
    """One sweep curve (corruption strength or attack strength vs mean IoU)."""
    xs = sorted(table)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [table[x] for x in xs], marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("mean IoU")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_em_trace(rows, out_path) -> Path:
    """Log-likelihood and free-energy convergence curves for the EM demo."""
    iters = [int(r["iter"]) for r in rows]
    ll = [float(r["log_likelihood"]) for r in rows]
    fe = [float(r["free_energy"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(iters, ll, label="log-likelihood", marker="o", markersize=3)
    ax.plot(iters, fe, label="free energy", marker="x", markersize=4, linestyle="--")
    cls = [r["classification_log_likelihood"] for r in rows]
    if all(c != "" for c in cls):
        ax.plot(iters, [float(c) for c in cls], label="classification objective",
                marker="s", markersize=3, linestyle=":")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
