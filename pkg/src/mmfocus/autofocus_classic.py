"""Joint sparse imaging and phase-error compensation by coordinate descent.

The solver alternates two blocks on the objective

    J(image, screen) = 0.5 * ||screen * signal - generate(image)||_F^2
                       + lam * sum(|image|)

with the screen constrained to unit modulus.  Image updates are proximal
gradient (ISTA) steps; screen updates are a gradient step followed by
projection back onto the unit circle.  Both step sizes are safe for inputs
scaled to unit peak magnitude, which the driver enforces internally.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ApertureConfig, as_complex_grid, require_finite
from .imaging import build_phase_term, op_generate, op_image


@dataclass(frozen=True)
class ClassicConfig:
    """Step sizes and stopping rules for the coordinate-descent solver.

    mu and rho are the image / screen gradient step sizes, lam the
    sparsity weight, gamma the weight of an optional screen-smoothness
    penalty (unused by the unit-modulus projection but kept so configs
    stay interchangeable with learned variants).
    """

    mu: float = 0.5
    rho: float = 0.5
    lam: float = 0.01
    gamma: float = 0.0
    max_iters: int = 300
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.mu <= 0 or self.rho <= 0:
            raise ValueError("step sizes mu and rho must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ValueError("lam and gamma must be non-negative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")


@dataclass(frozen=True)
class FocusResult:
    """Solver output: focused image, estimated screen, and convergence info."""

    image: np.ndarray
    compensator: np.ndarray
    objective_trace: np.ndarray
    iterations_run: int


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"mismatched grid shapes: {sorted(shapes)}")


def objective_eval(
    image: np.ndarray,
    screen: np.ndarray,
    signal: np.ndarray,
    phase_term_conj: np.ndarray,
    lam: float,
) -> float:
    """Data misfit plus lam-weighted l1 norm of the image magnitudes."""
    image = as_complex_grid(image)
    _check_same_shape(image, screen, signal, phase_term_conj)
    residual = screen * signal - op_generate(image, phase_term_conj)
    data = 0.5 * float(np.sum(np.abs(residual) ** 2))
    return data + lam * float(np.sum(np.abs(image)))


def grad_step_image(
    image: np.ndarray,
    screen: np.ndarray,
    signal: np.ndarray,
    phase_term: np.ndarray,
    phase_term_conj: np.ndarray,
    mu: float,
) -> np.ndarray:
    """One gradient step on the data term with the screen held fixed."""
    image = as_complex_grid(image)
    _check_same_shape(image, screen, signal, phase_term, phase_term_conj)
    residual = op_generate(image, phase_term_conj) - screen * signal
    return image - mu * op_image(residual, phase_term)


def soft_threshold(grid: np.ndarray, threshold: float) -> np.ndarray:
    """Complex magnitude shrinkage; phases are preserved, zeros stay zero."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    grid = as_complex_grid(grid)
    mag = np.abs(grid)
    scale = np.zeros_like(mag)
    np.divide(np.maximum(mag - threshold, 0.0), mag, out=scale, where=mag > 0)
    return grid * scale


def grad_step_phase(
    screen: np.ndarray,
    image: np.ndarray,
    signal: np.ndarray,
    phase_term_conj: np.ndarray,
    rho: float,
) -> np.ndarray:
    """One gradient step on the data term with the image held fixed."""
    screen = as_complex_grid(screen)
    _check_same_shape(screen, image, signal, phase_term_conj)
    residual = screen * signal - op_generate(image, phase_term_conj)
    return screen - rho * np.conj(signal) * residual


def prox_phase_unit_modulus(candidate: np.ndarray) -> np.ndarray:
    """Project each cell onto the unit circle; near-zero cells map to 1."""
    candidate = as_complex_grid(candidate)
    mag = np.abs(candidate)
    out = np.ones_like(candidate)
    np.divide(candidate, mag, out=out, where=mag >= 1e-12)
    return out


def run_coordinate_descent(
    signal: np.ndarray,
    aperture: ApertureConfig,
    k_r: float,
    r: float | None = None,
    cfg: ClassicConfig | None = None,
) -> FocusResult:
    """Alternate image and screen updates until the objective stalls.

    The image is initialized from plain inversion of the corrupted signal
    and the screen from all-ones.  The input is scaled to unit peak
    magnitude so the default step sizes satisfy the descent conditions;
    the returned image is scaled back.  The objective trace (initial value
    plus one entry per iteration) refers to the scaled problem.
    """
    cfg = cfg or ClassicConfig()
    signal = as_complex_grid(signal)
    require_finite("signal", signal)
    if r is None:
        r = aperture.z_target
    term = build_phase_term(aperture, k_r, r)
    term_conj = np.conj(term)

    peak = float(np.max(np.abs(signal)))
    scale = peak if peak > 0 else 1.0
    scaled = signal / scale

    image = op_image(scaled, term)
    screen = np.ones_like(scaled)
    shrink = cfg.mu * cfg.lam

    trace = [objective_eval(image, screen, scaled, term_conj, cfg.lam)]
    iterations = 0
    for _ in range(cfg.max_iters):
        pre_prox = grad_step_image(image, screen, scaled, term, term_conj, cfg.mu)
        image = soft_threshold(pre_prox, shrink)
        candidate = grad_step_phase(screen, image, scaled, term_conj, cfg.rho)
        screen = prox_phase_unit_modulus(candidate)
        trace.append(objective_eval(image, screen, scaled, term_conj, cfg.lam))
        iterations += 1
        if abs(trace[-2] - trace[-1]) <= cfg.tol * max(abs(trace[-2]), 1e-30):
            break

    trace_arr = np.asarray(trace, dtype=np.float64)
    rises = np.diff(trace_arr)
    if rises.size and float(np.max(rises)) > 1e-8:
        warnings.warn(
            f"objective rose by {float(np.max(rises)):.3e} during descent",
            RuntimeWarning,
            stacklevel=2,
        )
    result = FocusResult(
        image=image * scale,
        compensator=screen,
        objective_trace=trace_arr,
        iterations_run=iterations,
    )
    require_finite("focused image", result.image)
    return result
