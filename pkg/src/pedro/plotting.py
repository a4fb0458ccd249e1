"""Figures for the ``report`` and ``bench`` commands (PNG files)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rational import RationalActivation, gelu_reference  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_history(histories: dict[str, list[dict]], path):
    """Validation loss vs step, one line per run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        losses = []
        for label, rows in sorted(histories.items()):
            val = [r for r in rows if r["split"] == "val"]
            if val:
                ys = [float(r["loss"]) for r in val]
                losses += ys
                ax.plot([int(r["step"]) for r in val], ys, marker="o", ms=2, label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("val loss")
        # log axis only when the curves span more than a decade
        if losses and min(losses) > 0 and max(losses) / min(losses) > 10:
            ax.set_yscale("log")
        if histories:
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_activations(activations: list, path, lo: float = -3.0, hi: float = 3.0):
    """Learned per-layer activations against GELU and the GELU-fitted start."""
    from .rational import gelu_rational

    x = np.linspace(lo, hi, 301)
    init = gelu_rational().numpy_eval(x)
    n = len(activations)
    cols = min(n, 4)
    rows = int(np.ceil(n / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.1 * rows), squeeze=False)
        for i, act in enumerate(activations):
            ax = axes[i // cols][i % cols]
            ax.plot(x, gelu_reference(x), color="0.6", lw=2.5, label="GELU")
            ax.plot(x, init, color="0.2", ls="--", lw=1, label="rational init")
            if isinstance(act, RationalActivation):
                ax.plot(x, act.numpy_eval(x), color="C3", lw=1.2, label="learned")
            ax.set_title(f"layer {i + 1}")
        for j in range(n, rows * cols):
            axes[j // cols][j % cols].axis("off")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)


def plot_bench(reports: list[dict], path):
    """Median tokens/s per adapter, grouped by beam size."""
    kinds = sorted({r["adapter"] for r in reports})
    beams = sorted({r["beam"] for r in reports})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        width = 0.8 / max(1, len(beams))
        for j, beam in enumerate(beams):
            vals = []
            for k in kinds:
                hit = [r["tokens_per_second"] for r in reports if r["adapter"] == k and r["beam"] == beam]
                vals.append(hit[0] if hit else 0.0)
            ax.bar(np.arange(len(kinds)) + j * width, vals, width, label=f"beam {beam}")
        ax.set_xticks(np.arange(len(kinds)) + width * (len(beams) - 1) / 2)
        ax.set_xticklabels(kinds)
        ax.set_ylabel("tokens / s")
        ax.legend(frameon=False)
        return _save(fig, path)
