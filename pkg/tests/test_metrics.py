"""Metric implementations against scalar-loop oracles."""

import numpy as np
import pytest

from mmfocus import metrics


def scalar_psnr(a, b, peak=1.0):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            d = float(a[i, j]) - float(b[i, j])
            total += d * d
    mse = total / a.size
    return 10.0 * np.log10(peak * peak / mse)


def scalar_ssim(a, b, window, k1=0.01, k2=0.03, dynamic_range=1.0):
    """Loop-based SSIM over valid window placements."""
    n = window.shape[0]
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    vals = []
    for i in range(a.shape[0] - n + 1):
        for j in range(a.shape[1] - n + 1):
            pa = a[i : i + n, j : j + n]
            pb = b[i : i + n, j : j + n]
            mu_a = float(np.sum(window * pa))
            mu_b = float(np.sum(window * pb))
            va = float(np.sum(window * pa * pa)) - mu_a * mu_a
            vb = float(np.sum(window * pb * pb)) - mu_b * mu_b
            cov = float(np.sum(window * pa * pb)) - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)  # uniform squared error 0.01
    assert metrics.psnr(a, b, peak=1.0) == pytest.approx(20.0, abs=1e-6)


def test_psnr_sentinel_on_identical():
    a = np.random.default_rng(0).random((8, 8))
    assert metrics.psnr(a, a) == metrics.PSNR_SENTINEL_DB


def test_psnr_matches_scalar_loop():
    rng = np.random.default_rng(1)
    a = rng.random((16, 16))
    b = rng.random((16, 16))
    assert metrics.psnr(a, b) == pytest.approx(scalar_psnr(a, b), abs=1e-9)


def test_psnr_symmetry_and_guards():
    rng = np.random.default_rng(2)
    a = rng.random((8, 8))
    b = rng.random((8, 8))
    assert metrics.psnr(a, b) == pytest.approx(metrics.psnr(b, a))
    with pytest.raises(ValueError):
        metrics.psnr(a, b[:4])
    with pytest.raises(ValueError):
        metrics.psnr(a, b, peak=0.0)


def test_ssim_identical_is_one():
    rng = np.random.default_rng(3)
    a = rng.random((32, 32))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_matches_scalar_loop():
    rng = np.random.default_rng(4)
    a = rng.random((16, 16))
    b = np.clip(a + 0.2 * rng.standard_normal((16, 16)), 0.0, 1.0)
    w = metrics._gaussian_window(11, 1.5)
    assert metrics.ssim(a, b) == pytest.approx(scalar_ssim(a, b, w), abs=1e-9)


def test_ssim_anticorrelated_binary_toy():
    rng = np.random.default_rng(5)
    a = (rng.random((11, 11)) > 0.5).astype(np.float64)
    b = 1.0 - a
    value = metrics.ssim(a, b)
    w = metrics._gaussian_window(11, 1.5)
    assert value == pytest.approx(scalar_ssim(a, b, w), abs=1e-9)
    assert value < 0.0


def test_ssim_symmetry_and_size_guard():
    rng = np.random.default_rng(6)
    a = rng.random((12, 12))
    b = rng.random((12, 12))
    assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)
    with pytest.raises(ValueError):
        metrics.ssim(a[:10], b[:10])


def test_entropy_closed_forms():
    img = np.zeros((8, 8))
    img[3, 4] = 2.5
    assert metrics.image_entropy(img) == pytest.approx(0.0, abs=1e-12)
    uniform = np.ones((8, 8))
    assert metrics.image_entropy(uniform) == pytest.approx(np.log(64.0), abs=1e-12)


def test_entropy_scale_invariance():
    rng = np.random.default_rng(7)
    a = rng.random((16, 16))
    assert metrics.image_entropy(3.7 * a) == pytest.approx(
        metrics.image_entropy(a), abs=1e-12
    )


def test_entropy_guards():
    with pytest.raises(ValueError):
        metrics.image_entropy(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        metrics.image_entropy(np.array([[1.0, -0.5]]))


def test_amplitude_normalized():
    g = np.array([[1 + 1j, 0.0], [0.0, 3 + 4j]])
    a = metrics.amplitude_normalized(g)
    assert a.min() == 0.0
    assert a.max() == 1.0
    assert metrics.amplitude_normalized(np.zeros((3, 3), dtype=complex)).max() == 0.0


def test_compare_images_report():
    rng = np.random.default_rng(8)
    ref = rng.random((16, 16)) + 1j * rng.random((16, 16))
    rep = metrics.compare_images(ref, ref)
    assert rep.psnr_db == metrics.PSNR_SENTINEL_DB
    assert rep.ssim == pytest.approx(1.0, abs=1e-9)
