"""File-based matplotlib renderings of experiment reports.

Every function takes a report dict (the JSON form) and a directory, writes
PNGs with fixed names, and returns the written paths. The Agg backend is
forced so rendering works headless; nothing is ever shown interactively.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_run_figures",
    "save_comparison_figures",
    "save_grid_figures",
    "save_ablation_figures",
    "save_report_figures",
]

_FIGSIZE = (7.0, 4.0)


def _finish(fig, out_dir, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _recall_points(recall: dict):
    ks = sorted(int(k) for k in recall["recall_at"])
    return ks, [recall["recall_at"][str(k)] for k in ks]


def save_run_figures(report: dict, out_dir) -> list:
    """Loss curves for both phases plus a Recall@K bar chart."""
    paths = []
    fig, axes = plt.subplots(1, 2, figsize=_FIGSIZE)
    if report.get("phase1"):
        axes[0].plot(report["phase1"]["loss_curve"], color="tab:blue")
        axes[0].set_title("phase 1 (confidence) loss")
    axes[0].set_xlabel("epoch")
    axes[1].plot(report["phase2"]["loss_curve"], color="tab:orange")
    axes[1].set_title(f"phase 2 ({report['loss']}) loss")
    axes[1].set_xlabel("epoch")
    paths.append(_finish(fig, out_dir, "loss_curves.png"))

    ks, values = _recall_points(report["recall"])
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.bar([str(k) for k in ks], values, color="tab:green")
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("K")
    ax.set_ylabel("Recall@K")
    ax.set_title(f"{report['loss']} retrieval on unseen classes")
    paths.append(_finish(fig, out_dir, "recall_at_k.png"))
    return paths


def save_comparison_figures(report: dict, out_dir) -> list:
    """Grouped Recall@K bars (seed means) and phase-2 curves per loss."""
    losses = report["losses"]
    paths = []
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ks = None
    width = 0.8 / len(losses)
    for i, name in enumerate(losses):
        runs = report["runs"][name]
        ks, _ = _recall_points(runs[0]["recall"])
        means = [float(np.mean([r["recall"]["recall_at"][str(k)] for r in runs]))
                 for k in ks]
        offset = (i - (len(losses) - 1) / 2.0) * width
        ax.bar(np.arange(len(ks)) + offset, means, width, label=name)
    ax.set_xticks(np.arange(len(ks)), [str(k) for k in ks])
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("K")
    ax.set_ylabel("mean Recall@K")
    ax.legend(fontsize=8)
    paths.append(_finish(fig, out_dir, "comparison_recall.png"))

    fig, ax = plt.subplots(figsize=_FIGSIZE)
    for name in losses:
        ax.plot(report["runs"][name][0]["phase2"]["loss_curve"], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("phase 2 loss (first seed)")
    ax.legend(fontsize=8)
    paths.append(_finish(fig, out_dir, "comparison_curves.png"))
    return paths


def save_grid_figures(report: dict, out_dir) -> list:
    """Heatmap of mean Recall@1 over the lambda x beta grid."""
    lambdas = report["lambdas"]
    betas = report["betas"]
    table = np.array([[np.nan if v is None else v for v in row]
                      for row in report["recall1_table"]], dtype=np.float64)
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    image = ax.imshow(table, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(betas)), [f"{b:g}" for b in betas])
    ax.set_yticks(range(len(lambdas)), [f"{v:g}" for v in lambdas])
    ax.set_xlabel("beta")
    ax.set_ylabel("lambda")
    for i in range(len(lambdas)):
        for j in range(len(betas)):
            text = "fail" if np.isnan(table[i, j]) else f"{table[i, j]:.3f}"
            ax.text(j, i, text, ha="center", va="center", color="white",
                    fontsize=8)
    fig.colorbar(image, ax=ax, label="mean Recall@1")
    return [_finish(fig, out_dir, "grid_recall1.png")]


def save_ablation_figures(report: dict, out_dir) -> list:
    """Per-seed paired bars: full train set vs confidence-filtered."""
    pairs = report["pairs"]
    seeds = [str(p["seed"]) for p in pairs]
    full = [p["full"]["recall"]["recall_at"]["1"] for p in pairs]
    filtered = [p["filtered"]["recall"]["recall_at"]["1"] for p in pairs]
    x = np.arange(len(pairs))
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    ax.bar(x - 0.2, full, 0.4, label="full")
    ax.bar(x + 0.2, filtered, 0.4,
           label=f"filtered (lambda_c={report['lambda_c']:g})")
    ax.axhline(report["mean_recall1_full"], color="tab:blue", ls="--", lw=1)
    ax.axhline(report["mean_recall1_filtered"], color="tab:orange", ls="--", lw=1)
    ax.set_xticks(x, seeds)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("seed")
    ax.set_ylabel("Recall@1")
    ax.set_title(f"{report['loss']}: noisy-sample filtering")
    ax.legend(fontsize=8)
    return [_finish(fig, out_dir, "ablation_recall1.png")]


_BY_KIND = {
    "run": save_run_figures,
    "comparison": save_comparison_figures,
    "grid": save_grid_figures,
    "ablation": save_ablation_figures,
}


def save_report_figures(report: dict, out_dir) -> list:
    """Dispatch on report["kind"]; unknown kinds are an error."""
    kind = report.get("kind")
    if kind not in _BY_KIND:
        raise ValueError(
            f"no figure renderer for report kind {kind!r}; "
            f"known: {', '.join(sorted(_BY_KIND))}"
        )
    return _BY_KIND[kind](report, out_dir)
