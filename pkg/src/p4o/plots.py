"""Figure rendering for the report paths; every command that emits delimited
output also renders the matching matplotlib figure next to it."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_learning_curve(rows: list[dict], path: str | Path, title: str = "") -> None:
    frames = [r["frames"] for r in rows]
    means = [r["rolling_mean"] for r in rows]
    errs = [r["rolling_stderr"] for r in rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    xs = [f for f, m in zip(frames, means) if m is not None]
    ys = [m for m in means if m is not None]
    es = [e if e is not None else 0.0 for m, e in zip(means, errs) if m is not None]
    if xs:
        ax1.plot(xs, ys, lw=1.5)
        lo = np.asarray(ys) - np.asarray(es)
        hi = np.asarray(ys) + np.asarray(es)
        ax1.fill_between(xs, lo, hi, alpha=0.25)
    ax1.set_xlabel("environment frames")
    ax1.set_ylabel("rolling mean score (last 100 episodes)")
    ax1.set_title(title or "learning curve")
    for key, label in (("loss_prediction", "prediction"), ("loss_actor", "actor"),
                       ("loss_critic", "critic")):
        ax2.plot(frames, [r.get(key, 0.0) for r in rows], lw=1.0, label=label)
    ax2.set_xlabel("environment frames")
    ax2.set_ylabel("loss")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_histograms(report: dict, path: str | Path) -> None:
    histos = report["histograms"]
    fig, axes = plt.subplots(1, len(histos), figsize=(4 * len(histos), 3.2))
    if len(histos) == 1:
        axes = [axes]
    for ax, (name, h) in zip(axes, histos.items()):
        edges = np.asarray(h["edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        ax.bar(centers, h["counts"], width=edges[1] - edges[0], align="center")
        ax.set_title(name)
        ax.set_xlim(-1.05, 1.05)
    r2 = report.get("r_squared")
    label = "undefined" if r2 is None else f"{r2:.4f}"
    fig.suptitle(f"activation distributions (prediction R^2 = {label}, "
                 f"large-scale reference {report['full_scale_reference_r2']})",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_compare(curves_a: list[list[tuple]], curves_b: list[list[tuple]],
                 label_a: str, label_b: str, path: str | Path) -> None:
    """Overlay per-seed learning curves with mean +/- standard error."""
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for curves, label, color in ((curves_a, label_a, "C0"), (curves_b, label_b, "C1")):
        stacked = []
        frames = None
        for curve in curves:
            xs = [f for f, m, _ in curve if m is not None]
            ys = [m for _, m, _ in curve if m is not None]
            ax.plot(xs, ys, color=color, alpha=0.25, lw=0.8)
            frames = xs
            stacked.append(ys)
        n = min(len(s) for s in stacked)
        arr = np.asarray([s[:n] for s in stacked])
        mean = arr.mean(axis=0)
        sem = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) if arr.shape[0] > 1 else 0 * mean
        ax.plot(frames[:n], mean, color=color, lw=2.0, label=label)
        ax.fill_between(frames[:n], mean - sem, mean + sem, color=color, alpha=0.25)
    ax.set_xlabel("environment frames")
    ax.set_ylabel("rolling mean score (last 100 episodes)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
