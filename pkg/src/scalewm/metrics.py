"""Image/video quality metrics: PSNR and SSIM on 8-bit frames."""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP_DB = 100.0

# ITU-R BT.601 luma coefficients.
_LUMA = np.array([0.299, 0.587, 0.114])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB between 8-bit images or videos.

    Zero MSE (identical inputs) is reported as the 100 dB cap so CSV fields
    stay finite.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 20.0 * math.log10(255.0 / math.sqrt(mse)))


def _to_luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ _LUMA
    if img.ndim == 2:
        return img
    raise ValueError(f"expected HxW or HxWx3 image, got shape {img.shape}")


def _ssim_single(a: np.ndarray, b: np.ndarray, window: int, sigma: float, data_range: float) -> float:
    # Gaussian-window structural similarity (Wang et al. form): local moments
    # via a truncated Gaussian filter, borders cropped by the window radius.
    truncate = (window - 1) / 2 / sigma
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(x):
        return gaussian_filter(x, sigma=sigma, truncate=truncate, mode="reflect")

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = filt(a * a)
    mu_bb = filt(b * b)
    mu_ab = filt(a * b)
    var_a = mu_aa - mu_a * mu_a
    var_b = mu_bb - mu_b * mu_b
    cov = mu_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    ssim_map = num / den
    pad = window // 2
    return float(ssim_map[pad:-pad, pad:-pad].mean())


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    data_range: float = 255.0,
    sigma: float = 1.5,
) -> float:
    """Structural similarity between 8-bit images or videos.

    Inputs are converted to luminance first; for videos (T x H x W x 3 or
    T x H x W) the per-frame values are averaged.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 4 or (a.ndim == 3 and a.shape[-1] != 3):
        frames = [(_to_luminance(fa), _to_luminance(fb)) for fa, fb in zip(a, b)]
    else:
        frames = [(_to_luminance(a), _to_luminance(b))]
    h, w = frames[0][0].shape
    if min(h, w) < window:
        raise ValueError(f"image {h}x{w} smaller than the {window}-pixel window")
    return float(np.mean([_ssim_single(fa, fb, window, sigma, data_range) for fa, fb in frames]))
