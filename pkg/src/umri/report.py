"""Figure rendering for the command-line report path.

Everything draws through the Agg backend and strips the software tag from
PNG metadata so repeated runs produce byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_image", "save_comparison", "save_loss_curve", "save_probe_panel"]

_SAVE_OPTS = {"metadata": {"Software": None}, "dpi": 110}


def _imshow(ax, image, title):
    ax.imshow(np.asarray(image), cmap="gray", interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def save_image(path, image, title: str = "") -> None:
    """Write one magnitude image as a grayscale PNG."""
    fig, ax = plt.subplots(figsize=(4, 4 * image.shape[0] / max(image.shape[1], 1)))
    _imshow(ax, image, title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_comparison(path, panels: list[tuple[str, np.ndarray]]) -> None:
    """Write labelled images side by side (reconstruction vs references)."""
    if not panels:
        raise ValueError("no panels to draw")
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.6))
    if len(panels) == 1:
        axes = [axes]
    for ax, (title, image) in zip(axes, panels):
        _imshow(ax, image, title)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_loss_curve(path, trace: list[tuple[int, float]], ylabel: str = "loss") -> None:
    """Write the optimization trace on a log scale."""
    if not trace:
        raise ValueError("empty trace")
    steps = [t for t, _ in trace]
    values = [v for _, v in trace]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.semilogy(steps, values, lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel(ylabel)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)


def save_probe_panel(path, probes) -> None:
    """Write per-layer least-squares fits of the target image.

    ``probes`` is the output of ``decoders.layer_probe``: one entry per
    hidden layer with the fitted image and its relative residual.
    """
    if not probes:
        raise ValueError("no probe results")
    fig, axes = plt.subplots(1, len(probes), figsize=(2.6 * len(probes), 3.2))
    if len(probes) == 1:
        axes = [axes]
    for ax, probe in zip(axes, probes):
        _imshow(ax, probe.fitted, f"layer {probe.layer}\nres {probe.relative_residual:.3f}")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
