"""Image-quality metrics: PSNR, SSIM, and image entropy.

All three operate on non-negative real amplitude images. The package
convention (applied by the helpers at the bottom) is min-max-normalized
magnitudes with dynamic range 1.0, so PSNR uses peak = 1 and SSIM uses
L = 1 with the standard 11x11 Gaussian window, sigma 1.5, K1 = 0.01,
K2 = 0.03, evaluated on the valid region only (no boundary padding).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

PSNR_SENTINEL_DB = 99.0
_MSE_FLOOR = 1e-20

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    entropy: float


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs hit the 99 dB sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dims must match")
    if peak <= 0.0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_SENTINEL_DB
    return float(10.0 * np.log10(peak * peak / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    t = np.arange(size) - half
    g1 = np.exp(-0.5 * (t / sigma) ** 2)
    w = np.outer(g1, g1)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float = 1.0) -> float:
    """Mean structural similarity over the valid (fully-windowed) region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dims must match")
    if min(a.shape) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels per axis")
    w = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2

    mu_a = convolve2d(a, w, mode="valid")
    mu_b = convolve2d(b, w, mode="valid")
    var_a = convolve2d(a * a, w, mode="valid") - mu_a * mu_a
    var_b = convolve2d(b * b, w, mode="valid") - mu_b * mu_b
    cov = convolve2d(a * b, w, mode="valid") - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def image_entropy(a: np.ndarray) -> float:
    """Shannon entropy (nats) of the a^2 energy distribution."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0.0):
        raise ValueError("amplitudes must be non-negative")
    energy = a * a
    total = energy.sum()
    if total <= 0.0:
        raise ValueError("entropy of an all-zero image is undefined")
    p = energy / total
    nonzero = p[p > 0.0]
    return float(-np.sum(nonzero * np.log(nonzero)))


def amplitude_normalized(grid: np.ndarray) -> np.ndarray:
    """Min-max-normalized magnitude of a complex grid, in [0, 1]."""
    a = np.abs(np.asarray(grid))
    lo = a.min()
    hi = a.max()
    if hi - lo <= 0.0:
        return np.zeros_like(a, dtype=np.float64)
    return ((a - lo) / (hi - lo)).astype(np.float64)


def compare_images(reference: np.ndarray, test: np.ndarray) -> MetricReport:
    """PSNR/SSIM of a test grid against a reference, package conventions.

    Both grids are reduced to normalized amplitudes first; entropy is
    reported for the test image.
    """
    ref = amplitude_normalized(reference)
    tst = amplitude_normalized(test)
    return MetricReport(
        psnr_db=psnr(ref, tst, peak=1.0),
        ssim=ssim(ref, tst, dynamic_range=1.0),
        entropy=image_entropy(tst) if tst.max() > 0 else 0.0,
    )
