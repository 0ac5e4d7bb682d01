"""Shared helpers for exercising the unfolded model in tests."""

import numpy as np

from mmfocus import ifnet
from mmfocus.core import ApertureConfig, wavenumber
from mmfocus.diffcompute import complex_to_channels, gradient_check

APERTURE_16 = ApertureConfig(nx=16, ny=16, dx=1e-3, dy=1e-3, z_target=0.3)
K_START = wavenumber(77.0e9)


def build_small_model(n_stages=2, n_resblocks=2, dtype=np.float64, seed=0):
    arch = ifnet.IfnetArch(n_stages=n_stages, n_resblocks=n_resblocks)
    return ifnet.UnfoldingModel(arch, APERTURE_16, K_START, dtype=dtype, seed=seed)


def full_model_gradient_error(
    dtype, eps, seed_model, seed_dir, n_stages=2, n_resblocks=2, n_directions=2
):
    """Worst relative error between analytic and differenced loss slopes.

    The analytic gradients always come from the model under test.  eps
    must stay well below the distance of hidden units to their nearest
    ReLU or shrinkage kink (about 1e-4 on 16x16 inputs), otherwise the
    central difference straddles a slope jump and measures garbage; at
    eps = 1e-5 per-parameter probes agree to better than 1e-8.

    For float32 models the differenced slope is measured on a float64
    twin holding bit-identical weights: the float32 forward quantizes to
    about 1e-7 relative, which at a kink-safe eps would swamp the slope
    being measured.  The twin is the measuring instrument; the gradients
    under test still come from the float32 backward pass.
    """
    model = build_small_model(n_stages, n_resblocks, dtype=dtype, seed=seed_model)
    rng = np.random.default_rng(seed_model + 1)
    z = rng.random((16, 16)) + 1j * rng.random((16, 16))
    target = complex_to_channels(
        (rng.random((16, 16)) + 1j * rng.random((16, 16)))[None]
    ).astype(dtype)

    def grad_fn():
        model.store.zero_grads()
        sigma2, _ = model.forward_pass(z)
        _, g = ifnet._amplitude_mse_grad(sigma2, target)
        model.backward_pass(g)
        return [p.grad for p in model.store.params()]

    if np.dtype(dtype) == np.float64:
        probe = model
    else:
        probe = build_small_model(n_stages, n_resblocks, dtype=np.float64, seed=seed_model)
        for twin_param, param in zip(probe.store.params(), model.store.params()):
            twin_param.value[...] = param.value.astype(np.float64)
    target64 = target.astype(np.float64)

    def forward_fn():
        sigma2, _ = probe.forward_pass(z)
        return ifnet._amplitude_mse_grad(sigma2, target64, want_grad=False)[0]

    variables = [p.value for p in probe.store.params()]
    return gradient_check(
        forward_fn, grad_fn, variables, eps=eps, n_directions=n_directions, seed=seed_dir
    )
