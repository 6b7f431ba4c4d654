"""Figures written next to the CSV outputs of ``eval``, ``train`` and ``denoise``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 100,
}


def _save(fig, path):
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def image_panel(images, titles, path, suptitle=None):
    """Side-by-side grayscale images on a shared [0, 255] scale."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(2.6 * len(images), 2.9), squeeze=False)
        for ax, img, title in zip(axes[0], images, titles):
            ax.imshow(np.clip(img, 0, 255), cmap="gray", vmin=0, vmax=255, interpolation="nearest")
            ax.set_title(title)
            ax.set_axis_off()
        if suptitle:
            fig.suptitle(suptitle)
        fig.tight_layout()
        _save(fig, path)


def loss_curve(history, path, window: int = 50):
    steps = np.array([h[0] for h in history])
    loss = np.array([h[1] for h in history])
    val = [(h[0], h[2]) for h in history if h[2] is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, loss, lw=0.5, color="0.7", label="loss")
        if loss.size >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, lw=1.2, color="C0", label=f"{window}-step mean")
        ax.set_xlabel("step")
        ax.set_ylabel("sum of squared errors")
        ax.set_yscale("log")
        if val:
            ax2 = ax.twinx()
            ax2.plot(*zip(*val), "o-", ms=3, color="C3", label="validation PSNR")
            ax2.set_ylabel("PSNR [dB]")
            ax2.spines["top"].set_visible(False)
        ax.legend(loc="upper right")
        fig.tight_layout()
        _save(fig, path)


def psnr_bars(rows, path, method: str):
    """Grouped bars of denoised PSNR per image, one group per noise level."""
    sigmas = sorted({r["sigma"] for r in rows})
    names = sorted({r["image"] for r in rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(names) + 2), 3))
        width = 0.8 / len(sigmas)
        x = np.arange(len(names))
        for i, s in enumerate(sigmas):
            vals = [next((r["psnr"] for r in rows if r["image"] == n and r["sigma"] == s), np.nan)
                    for n in names]
            ax.bar(x + (i - (len(sigmas) - 1) / 2) * width, vals, width, label=f"sigma={s:g}")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right")
        ax.set_ylabel("PSNR [dB]")
        ax.set_title(f"{method}: denoised PSNR")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def dictionary_atoms(D, path, title=None):
    """Tile the atoms of a dictionary as small patches."""
    p, m = D.shape
    side = int(round(np.sqrt(p)))
    cols = int(np.ceil(np.sqrt(m)))
    rows = int(np.ceil(m / cols))
    tile = np.ones((rows * (side + 1) + 1, cols * (side + 1) + 1))
    for j in range(m):
        a = D[:, j].reshape(side, side)
        rng = np.ptp(a)
        a = (a - a.min()) / rng if rng > 0 else np.full_like(a, 0.5)
        r, c = divmod(j, cols)
        tile[1 + r * (side + 1):1 + r * (side + 1) + side, 1 + c * (side + 1):1 + c * (side + 1) + side] = a
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4 * rows / cols))
        ax.imshow(tile, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        fig.tight_layout()
        _save(fig, path)
