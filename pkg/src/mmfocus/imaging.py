"""Plane-to-plane imaging operators: RMA pair and direct back-projection.

The frequency-domain pair is the workhorse. With M = e^{+j kz r} on
propagating cells (zero elsewhere):

    image    I(S, M)     = ifft2(fft2(S) * M)
    generate G(sigma, Mc) = ifft2(fft2(sigma) * Mc),   Mc = conj(M)

Both use the package FFT convention from :mod:`mmfocus.core`, which makes
I and G exact mutual inverses on band-limited grids and, because |M| is
0 or 1, exact mutual adjoints as well. BPA is kept as a deliberate
O(voxels * measurements) sum: it is the independent oracle the fast path
is verified against, so it shares no code with the FFT route.
"""

from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np

from .core import (
    ApertureConfig,
    as_complex_grid,
    build_wavenumber_grid,
    fft2,
    ifft2,
)

if TYPE_CHECKING:  # pragma: no cover
    from .forward import MimoLayout, MultistaticSignal


def build_phase_term(aperture: ApertureConfig, k_r: float, r: float) -> np.ndarray:
    """Dispersion phase multiplier e^{+j kz r}, zeroed on evanescent cells.

    Pass the conjugate to :func:`op_generate`; r = 0 gives all ones on the
    propagating support.
    """
    wg = build_wavenumber_grid(aperture, k_r)
    term = np.exp(1j * wg.kz * r)
    term[wg.evanescent] = 0.0
    return term


def op_image(signal: np.ndarray, phase_term: np.ndarray) -> np.ndarray:
    """Migrate a single-frequency aperture signal to the target plane."""
    return ifft2(fft2(signal) * phase_term)


def op_generate(image: np.ndarray, phase_term_conj: np.ndarray) -> np.ndarray:
    """Synthesize the aperture signal a reflectivity plane would produce."""
    return ifft2(fft2(image) * phase_term_conj)


def band_limit(grid: np.ndarray, aperture: ApertureConfig, k_r: float) -> np.ndarray:
    """Project a grid onto the propagating spatial-frequency support."""
    wg = build_wavenumber_grid(aperture, k_r)
    spec = fft2(as_complex_grid(grid))
    spec[..., wg.evanescent] = 0.0
    return ifft2(spec)


def rma_reconstruct(
    signal: np.ndarray,
    aperture: ApertureConfig,
    k_r: float,
    r: float | None = None,
    pad: int = 1,
) -> np.ndarray:
    """One-call RMA image of a monostatic plane signal at depth r.

    r defaults to the aperture's reference target depth. pad > 1 zero-pads
    the aperture by that factor before the FFT sandwich and crops after,
    which suppresses cyclic wraparound when the signal comes from a real
    (non-lattice) wavefront; pad = 1 is the bare operator sandwich and is
    exactly invertible against simulate_mono_plane.
    """
    depth = aperture.z_target if r is None else r
    sig = as_complex_grid(signal)
    if pad < 1:
        raise ValueError("pad factor must be >= 1")
    if pad == 1:
        return op_image(sig, build_phase_term(aperture, k_r, depth))
    padded_ap = ApertureConfig(
        nx=aperture.nx * pad,
        ny=aperture.ny * pad,
        dx=aperture.dx,
        dy=aperture.dy,
        z_target=aperture.z_target,
    )
    padded = np.zeros((padded_ap.nx, padded_ap.ny), dtype=np.complex128)
    padded[: aperture.nx, : aperture.ny] = sig
    img = op_image(padded, build_phase_term(padded_ap, k_r, depth))
    return img[: aperture.nx, : aperture.ny]


def _pairwise_distances(elements: np.ndarray, voxels: np.ndarray) -> np.ndarray:
    """Euclidean distances, elements (M, 3) against voxels (N, 3) -> (M, N)."""
    diff = elements[:, None, :] - voxels[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def bpa_reconstruct(
    signal: "MultistaticSignal",
    layout: "MimoLayout",
    voxels: np.ndarray,
    chunk: int = 2048,
) -> np.ndarray:
    """Back-project a multistatic signal onto arbitrary voxels.

    Direct sum of s * e^{+j k (R_tx + R_rx)} over every scan position,
    tx/rx pair, and wavenumber. Returns one complex amplitude per voxel.
    """
    voxels = np.atleast_2d(np.asarray(voxels, dtype=np.float64))
    if voxels.shape[1] != 3:
        raise ValueError("voxels must be (N, 3) xyz positions")
    samples = signal.samples
    k_values = np.asarray(signal.k_values, dtype=np.float64)
    n_scan, n_tx, n_rx, n_k = samples.shape
    out = np.zeros(voxels.shape[0], dtype=np.complex128)
    for start in range(0, voxels.shape[0], chunk):
        vox = voxels[start : start + chunk]
        acc = np.zeros(vox.shape[0], dtype=np.complex128)
        for s in range(n_scan):
            tx = layout.tx_elements(s)
            rx = layout.rx_elements(s)
            r_tx = _pairwise_distances(tx, vox)  # (n_tx, nv)
            r_rx = _pairwise_distances(rx, vox)  # (n_rx, nv)
            # path length per (tx, rx, voxel), then phase per wavenumber
            path = r_tx[:, None, :] + r_rx[None, :, :]
            for q in range(n_k):
                phase = np.exp(1j * k_values[q] * path)
                acc += np.einsum("tr,trv->v", samples[s, :, :, q], phase)
        out[start : start + chunk] = acc
    return out


def bpa_reconstruct_mono(
    signal: np.ndarray,
    aperture: ApertureConfig,
    k_r: float,
    r: float | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """Back-project a monostatic plane signal onto the aperture lattice.

    Every virtual element is treated as a colocated tx/rx at z = 0, so the
    per-measurement phase is e^{+j 2 k R}. Output grid matches the signal
    shape and registers cell (i, j) to the aperture position (x_i, y_j) at
    depth r. This is the slow verification oracle for rma_reconstruct.
    """
    sig = as_complex_grid(signal)
    if sig.shape != (aperture.nx, aperture.ny):
        raise ValueError("signal shape does not match the aperture")
    depth = aperture.z_target if r is None else r
    xs = aperture.x_positions
    ys = aperture.y_positions
    ex, ey = np.meshgrid(xs, ys, indexing="ij")
    elements = np.column_stack([ex.ravel(), ey.ravel(), np.zeros(ex.size)])
    flat = sig.ravel()
    out = np.empty(ex.size, dtype=np.complex128)
    vox_x, vox_y = ex.ravel(), ey.ravel()
    for start in range(0, ex.size, chunk):
        vx = vox_x[start : start + chunk]
        vy = vox_y[start : start + chunk]
        dx = elements[:, 0][:, None] - vx[None, :]
        dy = elements[:, 1][:, None] - vy[None, :]
        dist = np.sqrt(dx * dx + dy * dy + depth * depth)
        out[start : start + chunk] = flat @ np.exp(2j * k_r * dist)
    return out.reshape(aperture.nx, aperture.ny)
