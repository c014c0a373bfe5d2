# This file is part of the UrbanVerse tool

# src/visualization/density_plot.py
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import seaborn as sns  # noqa: E402

logger = logging.getLogger(__name__)


def plot_density(curve, samples, truth=None, title=None, path="density.svg"):
    """KDE curve of the predictive samples with a sample rug and the ground truth line"""
    sns.set_theme(style="whitegrid", context="paper")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve.grid, curve.density, color="tab:blue", label=f"Epanechnikov KDE (b={curve.bandwidth:.3g})")
    ax.fill_between(curve.grid, curve.density, alpha=0.2, color="tab:blue")
    sns.rugplot(x=samples, ax=ax, color="tab:gray", height=0.05)
    if truth is not None:
        ax.axvline(truth, color="tab:red", linestyle="--", label="ground truth")
    ax.set_xlabel("target value")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Wrote density plot to {path}")
    return path
