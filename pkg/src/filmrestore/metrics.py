"""PSNR / SSIM for clips in [0, 1]."""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InputError, UndefinedMetricError

PSNR_CAP = 99.0
_LUMA = np.array([0.299, 0.587, 0.114])


def _arr(x):
    return np.asarray(x.data if hasattr(x, "fps") else x, dtype=np.float64)


def psnr(a, b, mask=None) -> float:
    """Per-frame ``10 log10(1 / MSE)`` (capped at 99 dB) averaged over frames.

    With a mask ``(N, H, W)`` only masked pixels count; frames without any
    masked pixel are skipped.
    """
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    values = []
    for i in range(a.shape[0]):
        if mask is None:
            mse = sq[i].mean()
        else:
            m = np.asarray(mask[i], dtype=bool)
            if not m.any():
                continue
            mse = sq[i][m].mean()
        values.append(PSNR_CAP if mse <= 0 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))
    if not values:
        raise UndefinedMetricError("mask selects no pixels")
    return float(np.mean(values))


def _gray(x: np.ndarray) -> np.ndarray:
    return x[..., 0] if x.shape[-1] == 1 else x[..., :3] @ _LUMA


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean Gaussian-window SSIM over frames (luminance for colour input, valid region only)."""
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    if min(a.shape[1:3]) < window:
        raise InputError(f"frames {a.shape[1:3]} smaller than the {window}x{window} window")
    c1, c2 = k1**2, k2**2
    r = window // 2
    truncate = r / sigma
    scores = []
    for fa, fb in zip(_gray(a), _gray(b)):
        filt = lambda x: gaussian_filter(x, sigma, truncate=truncate, mode="reflect")[r:-r, r:-r]
        mu_a, mu_b = filt(fa), filt(fb)
        va = filt(fa * fa) - mu_a**2
        vb = filt(fb * fb) - mu_b**2
        cov = filt(fa * fb) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
        scores.append(s.mean())
    return float(np.mean(scores))


def clip_report(restored, clean, mask) -> dict:
    return {
        "psnr_full": psnr(restored, clean),
        "psnr_masked": psnr(restored, clean, mask) if np.asarray(mask).any() else float("nan"),
        "ssim_full": ssim(restored, clean),
    }
