"""Handheld-trajectory motion errors and the phase screens they induce.

A trajectory is a per-scan-position deviation dz along the range axis.
Because the array is rigid, one deviation applies to a whole column of
the aperture, and a two-way range change of dz perturbs the measured
phase by 2*k*dz, giving the column-constant screen

    screen[x, y] = exp(-j * 2 * k_r * dz[x])

Corruption is elementwise multiplication by the screen (optionally plus
AWGN); the oracle compensator is its conjugate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import as_complex_grid


@dataclass(frozen=True)
class Trajectory:
    """Range-axis deviation per scan position [m] and the seed that made it."""

    dz: np.ndarray
    rng_seed: int | None = None

    def __post_init__(self) -> None:
        dz = np.atleast_1d(np.asarray(self.dz, dtype=np.float64))
        if dz.ndim != 1:
            raise ValueError("dz must be one value per scan position")
        if not np.all(np.isfinite(dz)):
            raise ValueError("trajectory contains non-finite deviations")
        object.__setattr__(self, "dz", dz)

    @property
    def nx(self) -> int:
        return self.dz.shape[0]

    def mean_removed(self) -> "Trajectory":
        """Same deviations with the constant offset dropped.

        A constant dz is indistinguishable from refocusing at a slightly
        different depth, so it carries no phase-error content.
        """
        return Trajectory(dz=self.dz - self.dz.mean(), rng_seed=self.rng_seed)


def gen_trajectory(nx: int, sigma: float, smoothness: float = 5.0, seed: int = 0) -> Trajectory:
    """Smooth zero-mean Gaussian deviation process with sample std = sigma.

    White Gaussian draws are convolved with a Gaussian kernel whose width
    is ``smoothness`` scan positions, then mean-removed and rescaled so the
    sample standard deviation is exactly sigma. Deterministic per seed.
    """
    if nx < 1:
        raise ValueError("need at least one scan position")
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    if smoothness < 1.0:
        raise ValueError("correlation length must be at least one position")
    if sigma == 0.0:
        return Trajectory(dz=np.zeros(nx), rng_seed=seed)
    rng = np.random.default_rng(seed)
    half = int(np.ceil(4.0 * smoothness))
    t = np.arange(-half, half + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / smoothness) ** 2)
    white = rng.standard_normal(nx + 2 * half)
    smooth = np.convolve(white, kernel, mode="valid")  # length nx
    smooth = smooth - smooth.mean()
    std = smooth.std()
    if std == 0.0:
        # nx == 1 collapses to zero after mean removal; nothing to scale.
        return Trajectory(dz=np.zeros(nx), rng_seed=seed)
    return Trajectory(dz=smooth * (sigma / std), rng_seed=seed)


def mix_mean(trajectories: list[Trajectory]) -> Trajectory:
    """Pointwise mean of several trajectories (ensemble synthesis)."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    nx = trajectories[0].nx
    if any(t.nx != nx for t in trajectories):
        raise ValueError("trajectory lengths differ")
    stack = np.stack([t.dz for t in trajectories])
    return Trajectory(dz=stack.mean(axis=0), rng_seed=None)


def traj_to_phase_screen(traj: Trajectory, k_r: float, ny: int) -> np.ndarray:
    """Column-constant unit-modulus screen e^{-j 2 k dz[x]}, shape (nx, ny)."""
    if ny < 1:
        raise ValueError("need at least one array element")
    column = np.exp(-2j * k_r * traj.dz)
    return np.repeat(column[:, None], ny, axis=1)


def corrupt_signal(
    signal: np.ndarray,
    screen: np.ndarray,
    noise_snr_db: float | None = None,
    seed: int = 0,
) -> np.ndarray:
    """Apply a phase screen to a signal, optionally adding AWGN.

    SNR is defined against the corrupted signal power averaged over all
    cells. Noise-free corruption preserves the signal norm exactly.
    """
    sig = as_complex_grid(signal)
    scr = as_complex_grid(screen)
    if sig.shape != scr.shape:
        raise ValueError("signal and screen dims must match")
    out = scr * sig
    if noise_snr_db is not None:
        rng = np.random.default_rng(seed)
        power = float(np.mean(np.abs(out) ** 2))
        noise_power = power / (10.0 ** (noise_snr_db / 10.0))
        scale = np.sqrt(noise_power / 2.0)
        out = out + scale * (
            rng.standard_normal(out.shape) + 1j * rng.standard_normal(out.shape)
        )
    return out


def oracle_compensator(screen: np.ndarray) -> np.ndarray:
    """Conjugate screen; multiplying it onto the corruption cancels exactly."""
    return np.conj(as_complex_grid(screen))
