"""Figures written next to the CSV reports: preview grids, loss curves, sampler steps."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
    "savefig.dpi": 120,
}


def _rgb(frame):
    frame = np.asarray(frame)
    return np.repeat(frame, 3, axis=-1) if frame.shape[-1] == 1 else frame


def mask_overlay(frame, mask, color=(1.0, 0.0, 0.0), alpha=0.6):
    out = _rgb(frame).copy()
    m = np.asarray(mask, dtype=bool)
    out[m] = (1 - alpha) * out[m] + alpha * np.asarray(color)
    return out


def preview_grid(path, degraded, restored, clean, mask, frames=None, title=None):
    """Rows are frames; columns degraded | restored | clean | mask overlay."""
    degraded, restored, clean = (np.asarray(v.data if hasattr(v, "fps") else v) for v in (degraded, restored, clean))
    n = degraded.shape[0]
    frames = list(frames) if frames is not None else sorted({0, n // 2, n - 1})
    cols = ("degraded", "restored", "clean", "mask")
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(frames), 4, figsize=(4 * 1.8, len(frames) * 1.8), squeeze=False)
        for r, f in enumerate(frames):
            images = (_rgb(degraded[f]), _rgb(restored[f]), _rgb(clean[f]), mask_overlay(clean[f], mask[f]))
            for c, img in enumerate(images):
                ax = axes[r, c]
                ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(cols[c])
            axes[r, 0].set_ylabel(f"frame {f}")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def loss_curves(csv_path, path, columns=("l_noise", "l_preprocess", "l_defect", "l_total")):
    rows = list(csv.DictReader(open(csv_path)))
    if not rows:
        return None
    steps = [int(r["step"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for col in columns:
            if col in rows[0]:
                vals = np.array([float(r[col]) for r in rows])
                if np.any(vals > 0):
                    ax.plot(steps, vals, label=col)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def step_strip(path, images, labels):
    """One row of decoded sampler previews."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(images), figsize=(1.5 * len(images), 1.8), squeeze=False)
        for ax, img, lab in zip(axes[0], images, labels):
            ax.imshow(np.clip(_rgb(img), 0, 1), interpolation="nearest")
            ax.set_title(lab)
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
