"""Matplotlib renderers: every report path drops a PNG next to its
delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 120


def render_training_curves(steps: list[dict], out_path: Path) -> None:
    if not steps:
        return
    xs = [r["step"] for r in steps]

    def series(key):
        return [r[key] if r.get(key) is not None else np.nan for r in steps]

    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    axes[0, 0].plot(xs, series("outer_loss"), color="tab:blue")
    axes[0, 0].set_title("outer loss")
    axes[0, 1].plot(xs, series("query_acc"), label="query acc", color="tab:green")
    axes[0, 1].plot(xs, series("pseudo_acc"), label="pseudo acc", color="tab:orange", alpha=0.8)
    axes[0, 1].set_ylim(0, 1)
    axes[0, 1].set_title("accuracy")
    axes[0, 1].legend(loc="lower right", fontsize=8)
    axes[1, 0].plot(xs, series("alpha"), color="tab:red")
    axes[1, 0].set_title("effective propagation strength")
    axes[1, 1].plot(xs, series("gamma_mean"), color="tab:purple")
    axes[1, 1].set_title("mean modulation factor")
    for ax in axes.flat:
        ax.set_xlabel("outer step")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def render_eval_histogram(per_episode_accuracy: np.ndarray, summary: dict,
                          out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(per_episode_accuracy, bins=np.linspace(0, 1, 21), color="tab:green",
            edgecolor="black", alpha=0.8)
    label = f"mean {summary['accuracy']:.3f} ± {summary['ci95']:.3f}"
    ax.axvline(summary["accuracy"], color="black", linestyle="--", label=label)
    ax.set_xlabel("per-episode query accuracy")
    ax.set_ylabel("episodes")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def render_bench(report: dict, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    labels = ["modulated", "bypassed"]
    means = [report["modulated_mean_ms"], report["bypassed_mean_ms"]]
    stds = [report["modulated_std_ms"], report["bypassed_std_ms"]]
    ax.bar(labels, means, yerr=stds, capsize=6, color=["tab:blue", "tab:gray"])
    ax.set_ylabel("per-iteration wall time (ms)")
    ax.set_title(f"modulation overhead: {report['overhead_pct']:.2f}%")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)


def render_embedding_scatter(features: np.ndarray, gt: np.ndarray, roles: list[str],
                             pseudo: np.ndarray, out_path: Path) -> None:
    """First two feature dimensions; color is the ground-truth class, big
    markers are supports, x-marks are queries whose pseudo label is wrong."""
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    is_support = np.array([r == "support" for r in roles])
    cmap = plt.get_cmap("tab10")
    for cls in np.unique(gt):
        mask = (gt == cls) & ~is_support
        correct = mask & (pseudo == gt)
        wrong = mask & (pseudo != gt)
        ax.scatter(features[correct, 0], features[correct, 1], s=14, alpha=0.6,
                   color=cmap(int(cls) % 10))
        ax.scatter(features[wrong, 0], features[wrong, 1], s=26, alpha=0.9,
                   color=cmap(int(cls) % 10), marker="x")
        sup = (gt == cls) & is_support
        ax.scatter(features[sup, 0], features[sup, 1], s=90, edgecolor="black",
                   color=cmap(int(cls) % 10), marker="o", zorder=5)
    ax.set_xlabel("feature[0]")
    ax.set_ylabel("feature[1]")
    ax.set_title("episode embeddings (x = mislabeled query)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=_DPI)
    plt.close(fig)
