"""Grid and wavenumber bookkeeping shared by every imaging stage.

Conventions pinned here so the rest of the package never restates them:

* complex images and signals are 2D numpy arrays, axis 0 = scan axis x,
  axis 1 = array axis y, row-major in memory (a flat view interleaves
  re/im per cell, which is what the CSG1 file format stores)
* ``fft2`` is the unnormalized e^{-j} transform, ``ifft2`` carries the
  1/(rows*cols) factor, matching numpy; spectra live in natural DFT order
  and are only shifted for viewing
* spatial frequency samples are kx = 2*pi*n/(nx*dx) for the centered
  integer n that numpy's fftfreq assigns to each bin
* aperture element and image cell (i, j) sit at the centered position
  ((i - nx//2)*dx, (j - ny//2)*dy) in meters
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # [m/s]


class NonFiniteError(ArithmeticError):
    """Raised when a computation produced NaN or Inf where data was expected."""


def require_finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def as_complex_grid(arr: np.ndarray) -> np.ndarray:
    """Validate and return a 2D complex grid (no copy when already complex)."""
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D grid, got shape {a.shape}")
    if not np.iscomplexobj(a):
        a = a.astype(np.complex128)
    return a


@dataclass(frozen=True)
class ApertureConfig:
    """Planar scan geometry: nx positions along x, ny elements along y."""

    nx: int
    ny: int
    dx: float  # element pitch along the scan axis [m]
    dy: float  # element pitch along the array axis [m]
    z_target: float  # reference target plane depth [m]

    def __post_init__(self) -> None:
        if self.nx < 1 or self.ny < 1:
            raise ValueError("aperture needs at least one element per axis")
        if self.dx <= 0.0 or self.dy <= 0.0:
            raise ValueError("element pitch must be positive")
        if self.z_target <= 0.0:
            raise ValueError("target plane must sit in front of the aperture")

    @property
    def x_positions(self) -> np.ndarray:
        return (np.arange(self.nx) - self.nx // 2) * self.dx

    @property
    def y_positions(self) -> np.ndarray:
        return (np.arange(self.ny) - self.ny // 2) * self.dy


@dataclass(frozen=True)
class RadarConfig:
    """FMCW sweep parameters; defaults mirror a 77 GHz desk radar."""

    f_start_hz: float = 77.0e9
    chirp_slope_hz_per_s: float = 38.5e12
    n_samples: int = 256
    adc_rate_sps: float = 8.0e6

    def __post_init__(self) -> None:
        if self.f_start_hz <= 0.0:
            raise ValueError("start frequency must be positive")
        if self.n_samples < 1:
            raise ValueError("need at least one fast-time sample")
        if self.adc_rate_sps <= 0.0:
            raise ValueError("ADC rate must be positive")

    @property
    def bandwidth_hz(self) -> float:
        return self.chirp_slope_hz_per_s * self.n_samples / self.adc_rate_sps

    @property
    def k_start(self) -> float:
        """Wavenumber 2*pi*f/c of the sweep start [rad/m]."""
        return 2.0 * np.pi * self.f_start_hz / SPEED_OF_LIGHT

    def wavenumbers(self) -> np.ndarray:
        """Per-sample wavenumbers across the sweep [rad/m]."""
        t = np.arange(self.n_samples) / self.adc_rate_sps
        f = self.f_start_hz + self.chirp_slope_hz_per_s * t
        return 2.0 * np.pi * f / SPEED_OF_LIGHT


def wavenumber(frequency_hz: float) -> float:
    return 2.0 * np.pi * frequency_hz / SPEED_OF_LIGHT


@dataclass(frozen=True)
class WavenumberGrid:
    """Spatial-frequency lattice for one aperture and carrier wavenumber.

    kx/ky are 1D in natural DFT order; kz is the dispersion root
    sqrt(4*k_r^2 - kx^2 - ky^2) with evanescent cells forced to zero and
    flagged in ``evanescent``.
    """

    kx: np.ndarray
    ky: np.ndarray
    kz: np.ndarray
    evanescent: np.ndarray
    k_r: float

    @property
    def propagating_fraction(self) -> float:
        return float(1.0 - np.count_nonzero(self.evanescent) / self.evanescent.size)

    def kz_centered(self) -> np.ndarray:
        return np.fft.fftshift(self.kz)

    def evanescent_centered(self) -> np.ndarray:
        return np.fft.fftshift(self.evanescent)


def build_wavenumber_grid(aperture: ApertureConfig, k_r: float) -> WavenumberGrid:
    """Sample kx/ky for the aperture and evaluate the dispersion relation.

    A cell propagates only when kx^2 + ky^2 < 4*k_r^2 (strict, so the
    boundary itself counts as evanescent); kz is zero on evanescent cells.
    """
    if k_r <= 0.0:
        raise ValueError("carrier wavenumber must be positive")
    kx = 2.0 * np.pi * np.fft.fftfreq(aperture.nx, d=aperture.dx)
    ky = 2.0 * np.pi * np.fft.fftfreq(aperture.ny, d=aperture.dy)
    radial_sq = kx[:, None] ** 2 + ky[None, :] ** 2
    arg = 4.0 * k_r * k_r - radial_sq
    evanescent = arg <= 0.0
    kz = np.sqrt(np.where(evanescent, 0.0, arg))
    return WavenumberGrid(kx=kx, ky=ky, kz=kz, evanescent=evanescent, k_r=float(k_r))


@dataclass(frozen=True)
class NormalizationRecord:
    """Per-channel extrema captured by normalize_minmax, needed to undo it."""

    re_min: float
    re_max: float
    im_min: float
    im_max: float


def normalize_minmax(grid: np.ndarray) -> tuple[np.ndarray, NormalizationRecord]:
    """Min-max scale real and imaginary channels independently to [0, 1].

    A degenerate channel (max == min) maps to all zeros; denormalize
    restores the constant from the record.
    """
    g = as_complex_grid(grid)
    re = g.real
    im = g.imag
    rec = NormalizationRecord(
        re_min=float(re.min()),
        re_max=float(re.max()),
        im_min=float(im.min()),
        im_max=float(im.max()),
    )
    re_span = rec.re_max - rec.re_min
    im_span = rec.im_max - rec.im_min
    re01 = (re - rec.re_min) / re_span if re_span > 0.0 else np.zeros_like(re)
    im01 = (im - rec.im_min) / im_span if im_span > 0.0 else np.zeros_like(im)
    return re01 + 1j * im01, rec


def denormalize(grid01: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    g = as_complex_grid(grid01)
    re = g.real * (record.re_max - record.re_min) + record.re_min
    im = g.imag * (record.im_max - record.im_min) + record.im_min
    return re + 1j * im


def fft2(grid: np.ndarray) -> np.ndarray:
    """Forward 2D DFT, unnormalized, e^{-j} kernel, natural bin order."""
    return np.fft.fft2(grid, axes=(-2, -1))


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Inverse 2D DFT carrying the 1/(rows*cols) factor."""
    return np.fft.ifft2(spectrum, axes=(-2, -1))


def centered(spectrum: np.ndarray) -> np.ndarray:
    """View of a natural-order spectrum with DC moved to the array center."""
    return np.fft.fftshift(spectrum, axes=(-2, -1))
