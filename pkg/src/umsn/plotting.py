"""Matplotlib figures written next to reports and training logs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imageio import atomic_path  # noqa: E402
from .semantics import CLASS_NAMES  # noqa: E402

CLASS_COLORS = ["#4d4d4d", "#e08214", "#2166ac", "#1b7837"]

params = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "figure.facecolor": "w",
}


def _save(fig, path):
    # fixed metadata keeps reruns byte-identical
    with atomic_path(path) as tmp:
        fig.savefig(tmp, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def comparison_grid(blurry, deblurred, truth, path, title=None):
    """blurry | deblurred | truth side by side."""
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 3, figsize=(6.0, 2.2))
        for ax, img, label in zip(axes, (blurry, deblurred, truth), ("blurry", "deblurred", "truth")):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(label)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        _save(fig, path)


def per_class_summary(report, path):
    """Mean per-class PSNR and SSIM bars for a metric report."""
    pc = report.means.get("per_class", {}) if report.means else {}
    psnrs = [pc.get(n, {}).get("psnr") or 0.0 for n in CLASS_NAMES]
    ssims = [pc.get(n, {}).get("ssim") or 0.0 for n in CLASS_NAMES]
    with plt.rc_context(params):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        x = np.arange(len(CLASS_NAMES))
        a1.bar(x, psnrs, color=CLASS_COLORS)
        a1.set_ylabel("PSNR (dB)")
        a2.bar(x, ssims, color=CLASS_COLORS)
        a2.set_ylabel("SSIM")
        a2.set_ylim(0, 1)
        for ax in (a1, a2):
            ax.set_xticks(x)
            ax.set_xticklabels(CLASS_NAMES, rotation=20)
        fig.tight_layout()
        _save(fig, path)


def training_curves(history, path):
    """Loss curve, plus per-class confidences when the log has them."""
    iters = [h["iter"] for h in history]
    has_c = any(h.get("C") for h in history)
    with plt.rc_context(params):
        fig, axes = plt.subplots(1, 2 if has_c else 1, figsize=(6.4 if has_c else 3.4, 2.4), squeeze=False)
        ax = axes[0, 0]
        ax.plot(iters, [h["loss"] for h in history], color="k")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        if has_c:
            ax = axes[0, 1]
            c = np.array([h["C"] for h in history if h.get("C")])
            ci = [h["iter"] for h in history if h.get("C")]
            for k in range(c.shape[1]):
                ax.plot(ci, c[:, k], color=CLASS_COLORS[k], label=f"C{k + 1} {CLASS_NAMES[k]}")
            ax.set_xlabel("iteration")
            ax.set_ylabel("confidence")
            ax.set_ylim(0, 1.02)
            ax.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)
