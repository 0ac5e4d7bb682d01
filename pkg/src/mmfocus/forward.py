"""Scatterer-level signal simulation and multistatic-to-monostatic conversion.

The signal model is Born single-scatter, isotropic, phase only: a sample
for one tx/rx pair and wavenumber k is

    s = sum_i sigma_i * exp(-j k (R_tx,i + R_rx,i))

with no amplitude falloff. The monostatic conversion multiplies each pair
by exp(+j k (d_x^2 + d_y^2) / (4 z0)), which cancels the second-order
two-way path difference between the bistatic pair and a virtual element
at its midpoint, referenced to the plane depth z0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import imaging
from .core import ApertureConfig, as_complex_grid


@dataclass(frozen=True)
class Scene:
    """Point scatterers: positions (N, 3) in meters, complex reflectivity (N,)."""

    positions: np.ndarray
    reflectivity: np.ndarray

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=np.float64)
        refl = np.asarray(self.reflectivity, dtype=np.complex128)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if refl.shape != (pos.shape[0],):
            raise ValueError("need one reflectivity per scatterer")
        if np.any(pos[:, 2] <= 0.0):
            raise ValueError("scatterers must sit in front of the aperture (z > 0)")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "reflectivity", refl)

    @property
    def n_scatterers(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class MimoLayout:
    """Physical tx/rx elements at z = 0, rigidly scanned along x.

    tx_xy and rx_xy hold (x, y) element positions at scan offset zero;
    scan_x lists the x offsets of each scan stop.
    """

    tx_xy: np.ndarray
    rx_xy: np.ndarray
    scan_x: np.ndarray

    def __post_init__(self) -> None:
        tx = np.atleast_2d(np.asarray(self.tx_xy, dtype=np.float64))
        rx = np.atleast_2d(np.asarray(self.rx_xy, dtype=np.float64))
        scan = np.atleast_1d(np.asarray(self.scan_x, dtype=np.float64))
        if tx.shape[1] != 2 or rx.shape[1] != 2:
            raise ValueError("element positions must be (N, 2) xy pairs")
        object.__setattr__(self, "tx_xy", tx)
        object.__setattr__(self, "rx_xy", rx)
        object.__setattr__(self, "scan_x", scan)

    @property
    def n_tx(self) -> int:
        return self.tx_xy.shape[0]

    @property
    def n_rx(self) -> int:
        return self.rx_xy.shape[0]

    @property
    def n_scan(self) -> int:
        return self.scan_x.shape[0]

    def tx_elements(self, scan_index: int) -> np.ndarray:
        """(n_tx, 3) xyz positions of the tx elements at one scan stop."""
        out = np.zeros((self.n_tx, 3))
        out[:, 0] = self.tx_xy[:, 0] + self.scan_x[scan_index]
        out[:, 1] = self.tx_xy[:, 1]
        return out

    def rx_elements(self, scan_index: int) -> np.ndarray:
        out = np.zeros((self.n_rx, 3))
        out[:, 0] = self.rx_xy[:, 0] + self.scan_x[scan_index]
        out[:, 1] = self.rx_xy[:, 1]
        return out


@dataclass(frozen=True)
class MultistaticSignal:
    """Raw samples indexed (scan, tx, rx, wavenumber) plus the k axis."""

    samples: np.ndarray
    k_values: np.ndarray

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.complex128)
        k = np.atleast_1d(np.asarray(self.k_values, dtype=np.float64))
        if s.ndim != 4:
            raise ValueError("samples must be (scan, tx, rx, k)")
        if s.shape[3] != k.shape[0]:
            raise ValueError("wavenumber axis mismatch")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "k_values", k)


def linear_mimo_layout(
    n_tx: int, n_rx: int, dy: float, n_scan: int, dx: float
) -> MimoLayout:
    """Classic linear MIMO arrangement whose midpoints tile a uniform y grid.

    rx elements sit at pitch 2*dy, tx elements at pitch 2*n_rx*dy, so the
    n_tx*n_rx midpoints (tx + rx)/2 land on a uniform lattice of pitch dy
    with no collisions. Scanning along x at pitch dx fills the other axis.
    """
    tx = np.zeros((n_tx, 2))
    tx[:, 1] = np.arange(n_tx) * (2.0 * n_rx * dy)
    rx = np.zeros((n_rx, 2))
    rx[:, 1] = np.arange(n_rx) * (2.0 * dy)
    scan = np.arange(n_scan) * dx
    return MimoLayout(tx_xy=tx, rx_xy=rx, scan_x=scan)


def simulate_multistatic(
    scene: Scene, layout: MimoLayout, k_values: np.ndarray
) -> MultistaticSignal:
    """Evaluate the Born phase-only sum for every (scan, tx, rx, k) sample."""
    k_values = np.atleast_1d(np.asarray(k_values, dtype=np.float64))
    pos = scene.positions
    refl = scene.reflectivity
    out = np.zeros((layout.n_scan, layout.n_tx, layout.n_rx, k_values.size), dtype=np.complex128)
    for s in range(layout.n_scan):
        tx = layout.tx_elements(s)
        rx = layout.rx_elements(s)
        r_tx = imaging._pairwise_distances(tx, pos)  # (n_tx, n_scat)
        r_rx = imaging._pairwise_distances(rx, pos)  # (n_rx, n_scat)
        for q, k in enumerate(k_values):
            a = refl[None, :] * np.exp(-1j * k * r_tx)
            b = np.exp(-1j * k * r_rx)
            out[s, :, :, q] = a @ b.T
    return MultistaticSignal(samples=out, k_values=k_values)


def mono_conversion_factors(layout: MimoLayout, k_values: np.ndarray, z0: float) -> np.ndarray:
    """Midpoint phase corrections, shape (n_tx, n_rx, n_k)."""
    if z0 <= 0.0:
        raise ValueError("reference depth must be positive")
    k_values = np.atleast_1d(np.asarray(k_values, dtype=np.float64))
    d_x = layout.tx_xy[:, None, 0] - layout.rx_xy[None, :, 0]
    d_y = layout.tx_xy[:, None, 1] - layout.rx_xy[None, :, 1]
    sep_sq = d_x**2 + d_y**2
    return np.exp(1j * k_values[None, None, :] * sep_sq[:, :, None] / (4.0 * z0))


def mono_convert(
    signal: MultistaticSignal, layout: MimoLayout, z0: float
) -> tuple[np.ndarray, ApertureConfig]:
    """Collapse tx/rx pairs onto their midpoints as a virtual monostatic grid.

    Returns (grids, aperture) where grids has shape (n_k, nx, ny) over the
    virtual lattice. Raises ValueError when two pairs collide on one
    virtual cell or the midpoints do not tile a uniform lattice.
    """
    factors = mono_conversion_factors(layout, signal.k_values, z0)
    corrected = signal.samples * factors[None, :, :, :]

    mid_y = 0.5 * (layout.tx_xy[:, None, 1] + layout.rx_xy[None, :, 1])  # (n_tx, n_rx)
    mid_x0 = 0.5 * (layout.tx_xy[:, None, 0] + layout.rx_xy[None, :, 0])
    if np.ptp(mid_x0) > 1e-12:
        raise ValueError("tx/rx x offsets must agree so midpoints share the scan x")
    ys = np.sort(mid_y.ravel())
    if ys.size > 1:
        pitches = np.diff(ys)
        if np.any(pitches < 1e-12):
            raise ValueError("two tx/rx pairs collide on the same virtual cell")
        if np.ptp(pitches) > 1e-9 * max(abs(ys[-1]), pitches[0]):
            raise ValueError("virtual midpoints do not form a uniform y lattice")
        dy = float(pitches[0])
    else:
        dy = 1.0
    xs = layout.scan_x + float(mid_x0.ravel()[0])
    if xs.size > 1:
        xp = np.diff(xs)
        if np.any(xp <= 0.0) or np.ptp(xp) > 1e-9 * max(abs(xs[-1]), xp[0]):
            raise ValueError("scan stops must form a uniform increasing x lattice")
        dx = float(xp[0])
    else:
        dx = 1.0

    order = np.argsort(mid_y.ravel())
    n_k = signal.k_values.size
    flat = corrected.reshape(layout.n_scan, -1, n_k)[:, order, :]
    grids = np.ascontiguousarray(np.moveaxis(flat, 2, 0))
    aperture = ApertureConfig(nx=xs.size, ny=ys.size, dx=dx, dy=dy, z_target=z0)
    return grids, aperture


def simulate_mono_plane(
    plane: np.ndarray, aperture: ApertureConfig, k_r: float
) -> np.ndarray:
    """Signal over the virtual aperture from a reflectivity plane at z_target.

    This intentionally reuses the imaging module's generate operator, so it
    is the exact inverse-path of rma_reconstruct by construction.
    """
    term = imaging.build_phase_term(aperture, k_r, aperture.z_target)
    return imaging.op_generate(as_complex_grid(plane), np.conj(term))


def simulate_mono_points(
    scene: Scene, aperture: ApertureConfig, k_r: float
) -> np.ndarray:
    """Direct spherical-wave monostatic signal over the aperture lattice.

    Each virtual element is a colocated tx/rx at (x_i, y_j, 0), so the
    sample is sum_i sigma_i e^{-j 2 k R}. Unlike simulate_mono_plane this
    does not go through the FFT operators at all; it is the physical
    reference path used to cross-check them.
    """
    ex = aperture.x_positions[:, None, None]
    ey = aperture.y_positions[None, :, None]
    pos = scene.positions
    dist = np.sqrt(
        (ex - pos[None, None, :, 0]) ** 2
        + (ey - pos[None, None, :, 1]) ** 2
        + pos[None, None, :, 2] ** 2
    )
    return np.sum(scene.reflectivity[None, None, :] * np.exp(-2j * k_r * dist), axis=2)


def scene_to_plane(scene: Scene, aperture: ApertureConfig, depth_tol: float = 1e-9) -> np.ndarray:
    """Rasterize plane-resident scatterers onto the aperture-aligned lattice.

    Every scatterer must sit on the z_target plane (within depth_tol,
    relative) and inside the lattice footprint; reflectivities of
    scatterers sharing a cell accumulate.
    """
    plane = np.zeros((aperture.nx, aperture.ny), dtype=np.complex128)
    xs = aperture.x_positions
    ys = aperture.y_positions
    for (x, y, z), sigma in zip(scene.positions, scene.reflectivity):
        if abs(z - aperture.z_target) > depth_tol * aperture.z_target:
            raise ValueError("scatterer not on the reference plane")
        i = int(np.round((x - xs[0]) / aperture.dx))
        j = int(np.round((y - ys[0]) / aperture.dy))
        if not (0 <= i < aperture.nx and 0 <= j < aperture.ny):
            raise ValueError("scatterer outside the aperture footprint")
        plane[i, j] += sigma
    return plane
