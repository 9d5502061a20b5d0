"""PSNR and SSIM on images in [0, 1]."""
from __future__ import annotations

import math

import numpy as np

PSNR_CAP = 100.0


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)


def psnr(pred, target, max_val: float = 1.0) -> float:
    """PSNR in dB after clamping to [0, 1]; ``inf`` for identical images."""
    a, b = _pair(pred, target)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def capped_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_plane(a: np.ndarray, b: np.ndarray, g: np.ndarray, c1: float, c2: float) -> float:
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(pred, target, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Single-scale SSIM with a Gaussian window over the valid region.

    Accepts ``[H,W]`` or ``[C,H,W]``; colour images average the per-channel
    scores.
    """
    a, b = _pair(pred, target)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    return float(np.mean([_ssim_plane(a[c], b[c], g, c1, c2) for c in range(a.shape[0])]))


def report(per_sample: list[dict]) -> dict:
    """Aggregate ``[{"psnr_db", "ssim", ...}]`` into the metric report."""
    if not per_sample:
        raise ValueError("cannot aggregate an empty set of samples")
    return {
        "psnr_db": float(np.mean([capped_psnr(s["psnr_db"]) for s in per_sample])),
        "ssim": float(np.mean([s["ssim"] for s in per_sample])),
        "n_images": len(per_sample),
        "per_sample": [dict(s, psnr_db=capped_psnr(s["psnr_db"])) for s in per_sample],
    }
