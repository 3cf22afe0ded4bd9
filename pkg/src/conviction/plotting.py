"""PNG figures for reconstruction and training reports."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_images(path, images: Sequence[np.ndarray], titles: Sequence[str]) -> Path:
    """Side-by-side magnitude panels sharing one grey scale."""
    mags = [np.abs(im) for im in images]
    vmax = max(float(m.max()) for m in mags) or 1.0
    fig, axes = plt.subplots(1, len(mags), figsize=(3 * len(mags), 3.2))
    axes = np.atleast_1d(axes)
    for ax, m, t in zip(axes, mags, titles):
        ax.imshow(m, cmap="gray", vmin=0, vmax=vmax)
        ax.set_title(t, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def plot_trace(path, trace) -> Path:
    """Objective value and smoothing level per solver phase."""
    phases = [r.phase for r in trace]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3))
    a1.plot(phases, [r.phi for r in trace], marker=".")
    a1.set_xlabel("phase")
    a1.set_ylabel("objective")
    a2.semilogy(phases, [r.eps for r in trace], marker=".")
    a2.set_xlabel("phase")
    a2.set_ylabel("smoothing eps")
    fig.tight_layout()
    return _save(fig, path)


def plot_history(path, history: Sequence[dict], x: str, ys: Sequence[str], logy: bool = False) -> Path:
    """Curves of the named history columns against ``x``."""
    fig, ax = plt.subplots(figsize=(5, 3))
    xs = [row[x] for row in history]
    for y in ys:
        vals = [row.get(y, np.nan) for row in history]
        (ax.semilogy if logy else ax.plot)(xs, vals, label=y)
    ax.set_xlabel(x)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
