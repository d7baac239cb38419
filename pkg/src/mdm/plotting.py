"""Figures written next to the CSV/JSON outputs of the CLI.

Everything renders off-screen with the Agg backend and is saved to a file;
nothing is shown interactively.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imageio import render_heatmap  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mdm",
}

METHOD_COLORS = {"mdm": "#c0392b", "random": "#7f8c8d"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_curves(curves: Mapping[str, Mapping[str, Sequence]], path) -> None:
    """Mean deletion and insertion curves per method.

    ``curves[method][kind]`` is a list of :class:`~mdm.metrics.Curve` with
    ``kind`` in ``{"deletion", "insertion"}``.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.0), sharey=True)
        for ax, kind in zip(axes, ("deletion", "insertion")):
            for method, by_kind in curves.items():
                group = by_kind.get(kind, [])
                if not group:
                    continue
                fr = group[0].fractions
                mean = np.mean([c.scores for c in group], axis=0)
                auc = np.mean([c.auc for c in group])
                ax.plot(fr, mean, color=METHOD_COLORS.get(method), label=f"{method} (AUC {auc:.3f})")
                ax.fill_between(fr, mean, alpha=0.12, color=METHOD_COLORS.get(method))
            ax.set_title(kind.capitalize())
            ax.set_xlabel("fraction of pixels")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.legend(loc="best", frameon=False)
        axes[0].set_ylabel("class probability")
        _save(fig, path)


def plot_overlap_sweep(sweeps: Mapping[str, np.ndarray], path) -> None:
    """Dice / IoU / PPV / sensitivity against the cut percentile, one line per method.

    ``sweeps[method]`` has rows ``(percentile, dice, iou, ppv, sens)`` already
    averaged over images.
    """
    names = ("Dice", "IoU", "PPV", "Sensitivity")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(11, 2.8))
        for k, (ax, name) in enumerate(zip(axes, names)):
            for method, rows in sweeps.items():
                rows = np.asarray(rows)
                ax.plot(rows[:, 0], rows[:, k + 1], color=METHOD_COLORS.get(method), label=method)
            ax.set_title(name)
            ax.set_xlabel("percentile")
            ax.set_ylim(0, 1)
        axes[0].legend(frameon=False)
        _save(fig, path)


def plot_explanation(image, explanation, path, alpha: float = 0.5, beta: float = 0.3) -> None:
    """Input, fused mask, rendered heatmap and binary-mask image side by side."""
    x = np.asarray(image)
    gray = x[0] if x.shape[0] == 1 else x.transpose(1, 2, 0)
    panels = [
        ("input", gray, "gray"),
        ("fused masks", explanation.fused, "viridis"),
        ("heatmap", render_heatmap(explanation.heatmap, x, alpha, beta).transpose(1, 2, 0), None),
        ("binary mask image", explanation.binary_mask_image[0] if x.shape[0] == 1
         else explanation.binary_mask_image.transpose(1, 2, 0), "gray"),
    ]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        for ax, (title, img, cmap) in zip(axes, panels):
            ax.imshow(img, cmap=cmap, interpolation="nearest")
            ax.set_title(title)
            ax.set_axis_off()
        _save(fig, path)


def plot_traces(traces, path) -> None:
    """Consistency and L1 loss per iteration for every scale."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 2.8))
        cmap = plt.get_cmap("viridis", max(len(traces), 2))
        for i, tr in enumerate(traces):
            label = f"{tr.extents[0]}×{tr.extents[1]}"
            axes[0].plot(tr.consistency, color=cmap(i), label=label, lw=1)
            axes[1].plot(tr.l1, color=cmap(i), lw=1)
        axes[0].set_yscale("symlog", linthresh=1e-3)
        axes[0].set_title("consistency loss")
        axes[1].set_title("mean |d|")
        for ax in axes:
            ax.set_xlabel("iteration")
        axes[0].legend(frameon=False, ncol=2)
        _save(fig, path)
