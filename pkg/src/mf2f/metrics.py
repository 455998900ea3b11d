"""PSNR and single-scale SSIM.

Metrics are computed in the 0-255 float domain before any 8-bit export so
quantization and clipping never contaminate scores.  Sequence PSNR is the
mean of per-frame PSNRs (matching how per-frame adaptation curves are
aggregated), not the PSNR of the pooled MSE; identical inputs report +inf
rather than raising.
"""

from __future__ import annotations

import numpy as np

from . import imageops
from .errors import DimensionError


def _frame_psnr(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0, skip_first: int = 0) -> float:
    """PSNR of a frame pair, or mean per-frame PSNR of a (T, C, H, W) pair.

    ``skip_first`` drops leading frames from sequence scoring (adaptation
    warm-up is conventionally excluded).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 4:
        if skip_first >= a.shape[0]:
            raise DimensionError(f"skip_first={skip_first} leaves no frames of {a.shape[0]}")
        return float(np.mean([_frame_psnr(x, y, peak) for x, y in zip(a[skip_first:], b[skip_first:])]))
    if skip_first:
        raise DimensionError("skip_first only applies to (T, C, H, W) sequences")
    return _frame_psnr(a, b, peak)


def per_frame_psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> np.ndarray:
    """Vector of per-frame PSNRs for (T, C, H, W) sequences."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 4:
        raise DimensionError(f"expected matching (T, C, H, W) sequences, got {a.shape} vs {b.shape}")
    return np.array([_frame_psnr(x, y, peak) for x, y in zip(a, b)])


def _frame_ssim(a: np.ndarray, b: np.ndarray, window: int, k1: float, k2: float, peak: float) -> float:
    sigma = 1.5
    radius = window // 2
    kernel = imageops.gaussian_kernel1d(sigma, radius=radius)

    def smooth(img):
        return imageops.correlate1d(imageops.correlate1d(img, kernel, axis=-2), kernel, axis=-1)

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    peak: float = 255.0,
    skip_first: int = 0,
) -> float:
    """Mean single-scale SSIM (Gaussian window, sigma 1.5) over channels and
    pixels; sequences average per-frame scores."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape[-2:]) < window:
        raise DimensionError(f"frame spatial dims {a.shape[-2:]} smaller than ssim window {window}")
    if a.ndim == 4:
        if skip_first >= a.shape[0]:
            raise DimensionError(f"skip_first={skip_first} leaves no frames of {a.shape[0]}")
        return float(np.mean([_frame_ssim(x, y, window, k1, k2, peak) for x, y in zip(a[skip_first:], b[skip_first:])]))
    if skip_first:
        raise DimensionError("skip_first only applies to (T, C, H, W) sequences")
    return _frame_ssim(a, b, window, k1, k2, peak)
