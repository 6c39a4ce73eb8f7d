"""Figure rendering (FID curves, per-class sample grids, correlation heatmaps).

All figures go through the Agg backend with fixed PNG metadata so that
rerunning on the same inputs reproduces the same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path, config_hash: str | None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Software": None}
    if config_hash:
        meta["Description"] = f"config_hash={config_hash}"
    fig.savefig(path, dpi=100, metadata=meta)
    _pyplot().close(fig)
    return path


def fid_curve(histories: dict[str, Sequence[tuple[int, float]]], path, config_hash: str | None = None) -> Path:
    """One line per run: FID against epoch, best epoch marked."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, history in histories.items():
        epochs, fids = zip(*history) if history else ((), ())
        ax.plot(epochs, fids, marker="o", ms=3, label=name)
        if history:
            e, f = min(history, key=lambda t: (t[1], t[0]))
            ax.scatter([e], [f], marker="*", s=120, zorder=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("FID")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path, config_hash)


def sample_grid_figure(rows: dict[str, np.ndarray], classes: Sequence[str]):
    """Grid with one row per source and one column per class.

    ``rows`` maps a row title to an array ``(n_classes, H, W)`` holding one
    spectrogram per class, in class order.
    """
    plt = _pyplot()
    n_rows, n_cols = len(rows), len(classes)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.8 * n_cols, 1.9 * n_rows), squeeze=False)
    for r, (title, images) in enumerate(rows.items()):
        if len(images) != n_cols:
            raise ValueError(f"row {title!r} has {len(images)} images for {n_cols} classes")
        for c in range(n_cols):
            ax = axes[r][c]
            ax.imshow(images[c], origin="lower", aspect="auto", cmap="magma")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(classes[c], fontsize=8)
            if c == 0:
                ax.set_ylabel(title, fontsize=8)
    fig.tight_layout()
    return fig


def sample_grid(rows: dict[str, np.ndarray], classes: Sequence[str], path, config_hash: str | None = None) -> Path:
    return _save(sample_grid_figure(rows, classes), path, config_hash)


def heatmap(values: np.ndarray, path, title: str, config_hash: str | None = None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(values, cmap="RdBu_r", vmin=-1, vmax=1)
    ax.set_title(title)
    ax.set_xlabel("channel")
    ax.set_ylabel("channel")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path, config_hash)
