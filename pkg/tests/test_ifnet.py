"""Unfolding network: stage semantics, gradients, training behaviour."""

import numpy as np
import pytest
from conftest import full_model_gradient_error

from mmfocus import autofocus_classic as af
from mmfocus import ifnet
from mmfocus.core import ApertureConfig, wavenumber
from mmfocus.diffcompute import channels_to_complex, complex_to_channels, gradient_check
from mmfocus.imaging import build_phase_term, op_generate, op_image

AP16 = ApertureConfig(nx=16, ny=16, dx=1e-3, dy=1e-3, z_target=0.3)
K = wavenumber(77e9)
TERM16 = build_phase_term(AP16, K, AP16.z_target)


def small_model(n_stages=1, n_resblocks=1, dtype=np.float64, seed=0, **kw):
    arch = ifnet.IfnetArch(n_stages=n_stages, n_resblocks=n_resblocks)
    return ifnet.UnfoldingModel(arch, AP16, K, dtype=dtype, seed=seed, **kw)


def random_complex(seed, shape=(16, 16)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def as2(z, dtype=np.float64):
    z = np.asarray(z)
    if z.ndim == 2:
        z = z[None]
    return complex_to_channels(z).astype(dtype)


def test_arch_validation():
    with pytest.raises(ValueError):
        ifnet.IfnetArch(n_stages=0)
    with pytest.raises(ValueError):
        ifnet.IfnetArch(n_resblocks=0)
    bad_ap = ApertureConfig(nx=18, ny=16, dx=1e-3, dy=1e-3, z_target=0.3)
    with pytest.raises(ValueError):
        ifnet.UnfoldingModel(ifnet.IfnetArch(), bad_ap, K)


def test_train_config_schedule():
    cfg = ifnet.TrainConfig()
    assert cfg.lr_at(0) == 1e-4
    assert cfg.lr_at(49) == 1e-4
    assert cfg.lr_at(50) == pytest.approx(1e-4)
    assert cfg.lr_at(65) == pytest.approx(1e-4 * 15 / 30)
    assert cfg.lr_at(79) == pytest.approx(1e-4 / 30)
    with pytest.raises(ValueError):
        ifnet.TrainConfig(epochs=40, decay_start_epoch=50)
    with pytest.raises(ValueError):
        ifnet.TrainConfig(learning_rate=0.0)


def test_identity_imaging_stage_equals_classical_step():
    model = small_model()
    model.configure_identity()
    sigma = random_complex(1)
    rng = np.random.default_rng(2)
    phi = np.exp(1j * rng.uniform(-np.pi, np.pi, (16, 16)))
    s_eps = random_complex(3)

    out2 = model.imaging[0].forward(as2(sigma), as2(phi), as2(s_eps))
    got = channels_to_complex(out2)[0]

    r = af.grad_step_image(sigma, phi, s_eps, TERM16, np.conj(TERM16), 0.5)
    expected = af.soft_threshold(r, 0.0)
    assert np.max(np.abs(got - expected)) < 1e-6


def test_identity_stage_pair_equals_classical_iteration():
    model = small_model(seed=5)
    model.configure_identity()
    sigma = random_complex(4)
    rng = np.random.default_rng(5)
    phi = np.exp(1j * rng.uniform(-np.pi, np.pi, (16, 16)))
    s_eps = random_complex(6)

    s2 = as2(s_eps)
    conj_s2 = s2.copy()
    conj_s2[:, 1] = -conj_s2[:, 1]
    sig2 = model.imaging[0].forward(as2(sigma), as2(phi), s2)
    phi2 = model.focusing[0].forward(as2(phi), sig2, s2, conj_s2)

    r = af.grad_step_image(sigma, phi, s_eps, TERM16, np.conj(TERM16), 0.5)
    sig_c = af.soft_threshold(r, 0.0)
    v = af.grad_step_phase(phi, sig_c, s_eps, np.conj(TERM16), 0.5)
    phi_c = af.prox_phase_unit_modulus(v)

    assert np.max(np.abs(channels_to_complex(sig2)[0] - sig_c)) < 1e-6
    assert np.max(np.abs(channels_to_complex(phi2)[0] - phi_c)) < 1e-6


def test_exact_fit_identity_stage_is_fixed_point():
    model = small_model(seed=7)
    model.configure_identity()
    sigma = random_complex(8)
    s_eps = op_generate(sigma, np.conj(TERM16))
    phi = np.ones((16, 16), dtype=complex)
    out = channels_to_complex(
        model.imaging[0].forward(as2(sigma), as2(phi), as2(s_eps))
    )[0]
    # residual is exactly zero, so the identity blocks pass sigma through
    assert np.max(np.abs(out - sigma)) < 1e-6


def test_zero_weights_give_dead_network():
    model = small_model(seed=9, init_noise=0.0)
    stage = model.imaging[0]
    for conv in (stage.b1_conv1, stage.b1_conv2, stage.b2_conv1, stage.b2_conv2):
        conv.weight.value[...] = 0.0
        conv.bias.value[...] = 0.0
    out = stage.forward(as2(random_complex(10)), as2(np.ones((16, 16))), as2(random_complex(11)))
    assert np.all(out == 0.0)


def test_focusing_output_is_unit_modulus():
    model = small_model(n_resblocks=2, seed=12)
    rng = np.random.default_rng(13)
    sigma = random_complex(14)
    phi = np.exp(1j * rng.uniform(-np.pi, np.pi, (16, 16)))
    s_eps = random_complex(15)
    s2 = as2(s_eps)
    conj_s2 = s2.copy()
    conj_s2[:, 1] = -conj_s2[:, 1]
    phi2 = model.focusing[0].forward(as2(phi), as2(sigma), s2, conj_s2)
    mags = np.abs(channels_to_complex(phi2))
    assert np.allclose(mags, 1.0, atol=1e-12)


def test_forward_pass_composition_and_screen_modulus():
    model = small_model(n_stages=2, n_resblocks=1, seed=16)
    z = random_complex(17)
    sigma2, phi2 = model.forward_pass(z)
    assert sigma2.shape == (1, 2, 16, 16)
    assert np.allclose(np.abs(channels_to_complex(phi2)), 1.0, atol=1e-10)

    # manual replay of the two stages matches forward_pass exactly
    sigma = model._as_batch(z)
    phi = np.zeros_like(sigma)
    phi[:, 0] = 1.0
    signal = model.op_g.forward(sigma)
    conj_signal = signal.copy()
    conj_signal[:, 1] = -conj_signal[:, 1]
    for img, foc in zip(model.imaging, model.focusing):
        sigma = img.forward(sigma, phi, signal)
        phi = foc.forward(phi, sigma, signal, conj_signal)
    assert np.array_equal(sigma, sigma2)
    assert np.array_equal(phi, phi2)


def test_untrained_forward_is_stable_over_seeds():
    z = random_complex(18)
    z01, _ = __import__("mmfocus.core", fromlist=["normalize_minmax"]).normalize_minmax(z)
    in_norm = float(np.linalg.norm(z01))
    for seed in range(100):
        model = small_model(n_stages=2, n_resblocks=1, dtype=np.float32, seed=seed)
        sigma2, _ = model.forward_pass(z01)
        out = channels_to_complex(sigma2)
        assert np.all(np.isfinite(sigma2))
        ratio = float(np.linalg.norm(out)) / in_norm
        assert 0.1 < ratio < 10.0


def test_full_model_gradient_check_64bit():
    err = full_model_gradient_error(np.float64, 1e-5, seed_model=21, seed_dir=23)
    assert err <= 1e-4


def test_full_model_gradient_check_32bit():
    err = full_model_gradient_error(np.float32, 1e-5, seed_model=24, seed_dir=26)
    assert err <= 5e-3


def test_amplitude_mse_contracts():
    z = random_complex(27)
    assert ifnet.amplitude_mse(z, z) <= 1e-12
    rotated = z * np.exp(1j * 0.83)
    assert ifnet.amplitude_mse(rotated, z) <= 1e-12

    other = random_complex(28)
    expected = 0.0
    for i in range(16):
        for j in range(16):
            a = np.sqrt(z[i, j].real ** 2 + z[i, j].imag ** 2 + 1e-12)
            b = np.sqrt(other[i, j].real ** 2 + other[i, j].imag ** 2 + 1e-12)
            expected += (a - b) ** 2
    expected /= 256
    assert ifnet.amplitude_mse(z, other) == pytest.approx(expected, rel=1e-10)
    with pytest.raises(ValueError):
        ifnet.amplitude_mse(z, other[:8])


def test_identity_model_infer_round_trips_clean_input():
    model = small_model(n_stages=2, n_resblocks=1, seed=29)
    model.configure_identity()
    z = op_image(random_complex(30), TERM16)  # band-limited clean image
    focused, phi, record = ifnet.infer(model, z)
    assert focused.shape == z.shape
    assert np.allclose(np.abs(phi), 1.0, atol=1e-10)
    assert np.max(np.abs(focused - z)) < 1e-9 * max(1.0, float(np.max(np.abs(z))))


def test_batch_inference_matches_per_sample():
    model = small_model(n_stages=2, n_resblocks=1, dtype=np.float32, seed=31)
    a = random_complex(32)
    b = random_complex(33)
    both, phis, recs = ifnet.infer(model, np.stack([a, b]))
    one_a, phi_a, _ = ifnet.infer(model, a)
    one_b, phi_b, _ = ifnet.infer(model, b)
    assert len(recs) == 2
    assert np.allclose(both[0], one_a, atol=1e-5)
    assert np.allclose(both[1], one_b, atol=1e-5)
    assert np.allclose(phis[0], phi_a, atol=1e-5)
    assert np.allclose(phis[1], phi_b, atol=1e-5)


def test_single_pair_overfit():
    model = small_model(n_stages=3, n_resblocks=2, dtype=np.float32, seed=34)
    rng = np.random.default_rng(35)
    gt = np.zeros((16, 16), dtype=complex)
    for _ in range(3):
        gt[rng.integers(3, 13), rng.integers(3, 13)] = rng.uniform(0.5, 1.0)
    clean = op_generate(gt, np.conj(TERM16))
    screen = np.exp(-2j * K * rng.normal(0.0, 3e-4, 16))[:, None]
    distorted = op_image(clean * screen, TERM16)

    from mmfocus.core import normalize_minmax

    x01, _ = normalize_minmax(distorted)
    y01, _ = normalize_minmax(op_image(clean, TERM16))
    cfg = ifnet.TrainConfig(epochs=500, decay_start_epoch=500,
                            learning_rate=1e-3, batch_size=1, seed=36)
    result = ifnet.train(model, [(x01, y01)], cfg)
    first = result.history[0]["train_loss"]
    last = result.history[-1]["train_loss"]
    assert last < 0.1 * first


def test_training_is_deterministic():
    def run():
        model = small_model(n_stages=1, n_resblocks=1, dtype=np.float32, seed=40)
        rng = np.random.default_rng(41)
        pairs = []
        for _ in range(4):
            a = rng.random((16, 16)) + 1j * rng.random((16, 16))
            b = rng.random((16, 16)) + 1j * rng.random((16, 16))
            pairs.append((a, b))
        cfg = ifnet.TrainConfig(epochs=2, decay_start_epoch=2, batch_size=2, seed=42)
        result = ifnet.train(model, pairs, cfg)
        return result, model.store.state_dict()

    res1, state1 = run()
    res2, state2 = run()
    assert [r["train_loss"] for r in res1.history] == [r["train_loss"] for r in res2.history]
    for name in state1:
        assert np.array_equal(state1[name], state2[name])


def test_train_rejects_empty_dataset():
    model = small_model()
    with pytest.raises(ValueError):
        ifnet.train(model, [], ifnet.TrainConfig())
