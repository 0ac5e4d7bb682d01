"""Deep unfolding network: K alternating imaging and focusing stages.

Each stage mirrors one coordinate-descent iteration of the classical
solver, with the hand-tuned pieces replaced by learnable ones: the image
proximal step becomes conv blocks around a learnable soft threshold, the
screen proximal step becomes an encoder/ResBlock/decoder network followed
by a unit-modulus projection, and the step sizes become per-stage
softplus-parameterized scalars.

Everything runs on 2-channel real tensors (batch, 2, rows, cols) built
from complex grids.  The corrupted signal estimate used inside every
stage is regenerated once from the network input (the operators are
mutual inverses on band-limited grids) and treated as a constant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .core import ApertureConfig, NonFiniteError, normalize_minmax, denormalize
from .diffcompute import (
    Amplitude,
    ComplexMultiply,
    Conv2d,
    ConvTranspose2d,
    InstanceNorm2d,
    ParamStore,
    ReLU,
    SoftThresholdLearnable,
    SpectralFilter,
    UnitModulus,
    channels_to_complex,
    complex_to_channels,
    inv_softplus,
    softplus,
)
from .imaging import build_phase_term
from .metrics import amplitude_normalized, psnr, ssim


@dataclass(frozen=True)
class IfnetArch:
    """Stage and block counts; channel/kernel sizes are fixed by design."""

    n_stages: int = 5
    n_resblocks: int = 4

    def __post_init__(self) -> None:
        if self.n_stages < 1:
            raise ValueError("need at least one stage")
        if self.n_resblocks < 1:
            raise ValueError("need at least one ResBlock")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule; the learning rate decays linearly to zero
    between decay_start_epoch and the final epoch."""

    epochs: int = 80
    learning_rate: float = 1e-4
    decay_start_epoch: int = 50
    batch_size: int = 10
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < self.decay_start_epoch:
            raise ValueError("epochs must be >= decay_start_epoch")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unknown optimizer: {self.optimizer}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a zero-indexed epoch."""
        if epoch < self.decay_start_epoch:
            return self.learning_rate
        span = self.epochs - self.decay_start_epoch
        return self.learning_rate * (self.epochs - epoch) / span


def _identity_pair(conv_a: Conv2d, conv_b: Conv2d, rng, noise: float) -> None:
    """Configure a conv-ReLU-conv block as an exact identity plus noise.

    The first conv routes each input channel and its negation into
    separate hidden channels; after ReLU the second conv subtracts them,
    reconstructing the input for any sign.
    """
    wa = np.zeros_like(conv_a.weight.value)
    c = conv_a.kernel_size // 2
    wa[0, 0, c, c] = 1.0
    wa[1, 0, c, c] = -1.0
    wa[2, 1, c, c] = 1.0
    wa[3, 1, c, c] = -1.0
    wb = np.zeros_like(conv_b.weight.value)
    wb[0, 0, c, c] = 1.0
    wb[0, 1, c, c] = -1.0
    wb[1, 2, c, c] = 1.0
    wb[1, 3, c, c] = -1.0
    if noise > 0 and rng is not None:
        wa += (noise * rng.standard_normal(wa.shape)).astype(wa.dtype)
        wb += (noise * rng.standard_normal(wb.shape)).astype(wb.dtype)
    conv_a.weight.value[...] = wa
    conv_b.weight.value[...] = wb


def _conj_channels(t: np.ndarray) -> np.ndarray:
    out = t.copy()
    out[:, 1] = -out[:, 1]
    return out


class ImagingStage:
    """Gradient step on the data term, then conv/soft-threshold/conv prox."""

    def __init__(self, store, prefix, op_image_filter, op_generate_filter,
                 rng, dtype, init_noise):
        self.mu_raw = store.create(
            f"{prefix}.mu_raw", np.asarray(float(inv_softplus(0.5)), dtype=dtype)
        )
        self.b1_conv1 = Conv2d(store, f"{prefix}.b1.conv1", 2, 8, 3, dtype=dtype)
        self.b1_conv2 = Conv2d(store, f"{prefix}.b1.conv2", 8, 2, 3, dtype=dtype)
        self.soft = SoftThresholdLearnable(store, f"{prefix}.lam_raw", threshold=0.01, dtype=dtype)
        self.b2_conv1 = Conv2d(store, f"{prefix}.b2.conv1", 2, 8, 3, dtype=dtype)
        self.b2_conv2 = Conv2d(store, f"{prefix}.b2.conv2", 8, 2, 3, dtype=dtype)
        _identity_pair(self.b1_conv1, self.b1_conv2, rng, init_noise)
        _identity_pair(self.b2_conv1, self.b2_conv2, rng, init_noise)
        self.relu1 = ReLU()
        self.relu2 = ReLU()
        self.op_i = op_image_filter
        self.op_g = op_generate_filter
        self._cache = None

    def forward(self, sigma2, phi2, signal2):
        if sigma2.shape != phi2.shape or sigma2.shape != signal2.shape:
            raise ValueError("stage inputs must share one shape")
        self._cmul = ComplexMultiply()
        generated = self.op_g.forward(sigma2)
        residual = generated - self._cmul.forward(phi2, signal2)
        imaged = self.op_i.forward(residual)
        mu = float(softplus(float(self.mu_raw.value)))
        r = sigma2 - mu * imaged
        self._cache = (imaged, mu)
        h = self.b1_conv2.forward(self.relu1.forward(self.b1_conv1.forward(r)))
        h = self.soft.forward(h)
        return self.b2_conv2.forward(self.relu2.forward(self.b2_conv1.forward(h)))

    def backward(self, g_out):
        imaged, mu = self._cache
        self._cache = None
        g = self.b2_conv1.backward(self.relu2.backward(self.b2_conv2.backward(g_out)))
        g = self.soft.backward(g)
        g_r = self.b1_conv1.backward(self.relu1.backward(self.b1_conv2.backward(g)))
        raw = float(self.mu_raw.value)
        self.mu_raw.grad += np.asarray(
            -float((g_r * imaged).sum(dtype=np.float64)) * float(sigmoid(raw)),
            dtype=self.mu_raw.value.dtype,
        )
        g_residual = self.op_i.backward(-mu * g_r)
        g_phi, _ = self._cmul.backward(-g_residual)
        g_sigma = g_r + self.op_g.backward(g_residual)
        return g_sigma, g_phi


class FocusingStage:
    """Gradient step on the screen, learned prox, unit-modulus projection.

    With identity_prox set the learned encoder-decoder is bypassed and the
    gradient step result is projected directly, which reduces the stage to
    the classical screen update.
    """

    def __init__(self, store, prefix, op_generate_filter, n_resblocks, rng, dtype):
        self.rho_raw = store.create(
            f"{prefix}.rho_raw", np.asarray(float(inv_softplus(0.5)), dtype=dtype)
        )
        self.enc1 = Conv2d(store, f"{prefix}.enc1", 2, 32, 7, stride=2, rng=rng, dtype=dtype)
        self.norm1 = InstanceNorm2d(store, f"{prefix}.norm1", 32, dtype=dtype)
        self.enc2 = Conv2d(store, f"{prefix}.enc2", 32, 64, 3, stride=2, rng=rng, dtype=dtype)
        self.norm2 = InstanceNorm2d(store, f"{prefix}.norm2", 64, dtype=dtype)
        self.res = []
        for i in range(n_resblocks):
            c1 = Conv2d(store, f"{prefix}.res{i}.conv1", 64, 64, 3, rng=rng, dtype=dtype)
            c2 = Conv2d(store, f"{prefix}.res{i}.conv2", 64, 64, 3, rng=rng, dtype=dtype)
            self.res.append((c1, ReLU(), c2))
        self.dec1 = ConvTranspose2d(store, f"{prefix}.dec1", 64, 32, 3, rng=rng, dtype=dtype)
        self.norm3 = InstanceNorm2d(store, f"{prefix}.norm3", 32, dtype=dtype)
        self.dec2 = ConvTranspose2d(store, f"{prefix}.dec2", 32, 2, 3, rng=rng, dtype=dtype)
        self.dec2.bias.value[...] = np.asarray([1.0, 0.0], dtype=dtype)
        self.relu_e1 = ReLU()
        self.relu_e2 = ReLU()
        self.relu_d1 = ReLU()
        self.project = UnitModulus()
        self.op_g = op_generate_filter
        self.identity_prox = False
        self._cache = None

    def forward(self, phi2, sigma2, signal2, conj_signal2):
        if phi2.shape != sigma2.shape or phi2.shape != signal2.shape:
            raise ValueError("stage inputs must share one shape")
        self._cmul_data = ComplexMultiply()
        self._cmul_corr = ComplexMultiply()
        residual = self._cmul_data.forward(phi2, signal2) - self.op_g.forward(sigma2)
        correction = self._cmul_corr.forward(conj_signal2, residual)
        rho = float(softplus(float(self.rho_raw.value)))
        v = phi2 - rho * correction
        self._cache = (correction, rho)
        w = v if self.identity_prox else self._encdec_forward(v)
        return self.project.forward(w)

    def _encdec_forward(self, v):
        e = self.relu_e1.forward(self.norm1.forward(self.enc1.forward(v)))
        e = self.relu_e2.forward(self.norm2.forward(self.enc2.forward(e)))
        for c1, relu, c2 in self.res:
            e = e + c2.forward(relu.forward(c1.forward(e)))
        d = self.relu_d1.forward(self.norm3.forward(self.dec1.forward(e)))
        return self.dec2.forward(d)

    def _encdec_backward(self, g):
        g = self.dec2.backward(g)
        g = self.dec1.backward(self.norm3.backward(self.relu_d1.backward(g)))
        for c1, relu, c2 in reversed(self.res):
            g = g + c1.backward(relu.backward(c2.backward(g)))
        g = self.enc2.backward(self.norm2.backward(self.relu_e2.backward(g)))
        return self.enc1.backward(self.norm1.backward(self.relu_e1.backward(g)))

    def backward(self, g_phi_out):
        correction, rho = self._cache
        self._cache = None
        g_w = self.project.backward(g_phi_out)
        g_v = g_w if self.identity_prox else self._encdec_backward(g_w)
        raw = float(self.rho_raw.value)
        self.rho_raw.grad += np.asarray(
            -float((g_v * correction).sum(dtype=np.float64)) * float(sigmoid(raw)),
            dtype=self.rho_raw.value.dtype,
        )
        _, g_residual = self._cmul_corr.backward(-rho * g_v)
        g_phi, _ = self._cmul_data.backward(g_residual)
        g_sigma = self.op_g.backward(-g_residual)
        return g_v + g_phi, g_sigma


class UnfoldingModel:
    """K-stage unfolded solver bound to one imaging geometry."""

    def __init__(self, arch: IfnetArch, aperture: ApertureConfig, k_r: float,
                 r: float | None = None, seed: int = 0, dtype=np.float32,
                 init_noise: float = 0.02):
        if aperture.nx % 4 or aperture.ny % 4:
            raise ValueError("grid dims must be divisible by 4 (two stride-2 encoders)")
        self.arch = arch
        self.aperture = aperture
        self.k_r = float(k_r)
        self.r = float(aperture.z_target if r is None else r)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.init_noise = float(init_noise)
        term = build_phase_term(aperture, self.k_r, self.r)
        self.op_i = SpectralFilter(term)
        self.op_g = SpectralFilter(np.conj(term))
        self.store = ParamStore()
        rng = np.random.default_rng(seed)
        self.imaging = []
        self.focusing = []
        for k in range(arch.n_stages):
            self.imaging.append(
                ImagingStage(self.store, f"stage{k}.img", self.op_i, self.op_g,
                             rng, self.dtype, init_noise)
            )
            self.focusing.append(
                FocusingStage(self.store, f"stage{k}.foc", self.op_g,
                              arch.n_resblocks, rng, self.dtype)
            )

    def _as_batch(self, grid):
        z = np.asarray(grid, dtype=np.complex128)
        if z.ndim == 2:
            z = z[None]
        if z.ndim != 3 or z.shape[1] != self.aperture.nx or z.shape[2] != self.aperture.ny:
            raise ValueError(f"expected (*, {self.aperture.nx}, {self.aperture.ny}) grids")
        return complex_to_channels(z).astype(self.dtype)

    def forward_pass(self, sigma_input):
        """Run all stages; returns (image 2ch, screen 2ch) batched tensors."""
        sigma = self._as_batch(sigma_input)
        phi = np.zeros_like(sigma)
        phi[:, 0] = 1.0
        signal = self.op_g.forward(sigma)
        conj_signal = _conj_channels(signal)
        self._n_stages_run = 0
        for img_stage, foc_stage in zip(self.imaging, self.focusing):
            sigma = img_stage.forward(sigma, phi, signal)
            phi = foc_stage.forward(phi, sigma, signal, conj_signal)
            self._n_stages_run += 1
        return sigma, phi

    def backward_pass(self, g_sigma, g_phi=None):
        """Accumulate parameter gradients for the latest forward_pass."""
        if g_phi is None:
            g_phi = np.zeros_like(g_sigma)
        for img_stage, foc_stage in zip(reversed(self.imaging), reversed(self.focusing)):
            g_phi_prev, g_sigma_extra = foc_stage.backward(g_phi)
            g_sigma_prev, g_phi_extra = img_stage.backward(g_sigma + g_sigma_extra)
            g_sigma = g_sigma_prev
            g_phi = g_phi_prev + g_phi_extra
        return g_sigma, g_phi

    def configure_identity(self) -> None:
        """Pin every stage to the classical iteration: exact identity conv
        blocks, vanishing soft thresholds, bypassed encoder-decoders."""
        for stage in self.imaging:
            _identity_pair(stage.b1_conv1, stage.b1_conv2, None, 0.0)
            _identity_pair(stage.b2_conv1, stage.b2_conv2, None, 0.0)
            stage.b1_conv1.bias.value[...] = 0
            stage.b1_conv2.bias.value[...] = 0
            stage.b2_conv1.bias.value[...] = 0
            stage.b2_conv2.bias.value[...] = 0
            stage.soft.theta.value[...] = -40.0
            stage.mu_raw.value[...] = float(inv_softplus(0.5))
        for stage in self.focusing:
            stage.identity_prox = True
            stage.rho_raw.value[...] = float(inv_softplus(0.5))


def amplitude_mse(prediction, target) -> float:
    """Mean squared difference of stabilized magnitudes; phase-blind."""
    loss, _ = _amplitude_mse_grad(_to_2ch(prediction), _to_2ch(target), want_grad=False)
    return loss


def _to_2ch(grid):
    arr = np.asarray(grid)
    if np.iscomplexobj(arr):
        z = arr.astype(np.complex128)
        if z.ndim == 2:
            z = z[None]
        if z.ndim != 3:
            raise ValueError("expected 2D grids or a batch of them")
        return complex_to_channels(z)
    if arr.ndim == 3 and arr.shape[0] == 2:
        return arr[None]
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ValueError("expected complex grids or 2-channel tensors")
    return arr


def _amplitude_mse_grad(pred2, target2, want_grad=True):
    if pred2.shape != target2.shape:
        raise ValueError(f"shape mismatch: {pred2.shape} vs {target2.shape}")
    amp = Amplitude()
    a = amp.forward(pred2)
    b = np.sqrt(target2[:, 0] ** 2 + target2[:, 1] ** 2 + Amplitude.STAB)
    diff = a - b
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not want_grad:
        return loss, None
    g_amp = (2.0 / diff.size) * diff
    return loss, amp.backward(g_amp.astype(pred2.dtype))


class Adam:
    """Adaptive moment estimation with float64 moment buffers."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.value.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.value.shape, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= update.astype(p.value.dtype)


@dataclass(frozen=True)
class TrainResult:
    history: list
    best_epoch: int
    best_val_loss: float


def train(model: UnfoldingModel, pairs, cfg: TrainConfig, val_pairs=None,
          log_path=None) -> TrainResult:
    """Minimize mean amplitude MSE over normalized (input, truth) pairs.

    Logs one row per epoch; when a validation set is given, the model is
    left holding the parameters of its best validation epoch.
    """
    if not pairs:
        raise ValueError("empty training set")
    inputs = np.stack([_to_2ch(p[0])[0] for p in pairs]).astype(model.dtype)
    targets = np.stack([_to_2ch(p[1])[0] for p in pairs]).astype(model.dtype)
    if val_pairs:
        val_in = np.stack([_to_2ch(p[0])[0] for p in val_pairs]).astype(model.dtype)
        val_tg = np.stack([_to_2ch(p[1])[0] for p in val_pairs]).astype(model.dtype)

    opt = Adam(model.store.params())
    rng = np.random.default_rng(cfg.seed)
    history = []
    best_val = np.inf
    best_epoch = -1
    best_state = None

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            sigma, _ = model.forward_pass(channels_to_complex(inputs[batch]))
            loss, g_sigma = _amplitude_mse_grad(sigma, targets[batch])
            if not np.isfinite(loss):
                raise NonFiniteError(
                    f"training loss became non-finite at epoch {epoch}, "
                    f"batch starting at {start}"
                )
            model.store.zero_grads()
            model.backward_pass(g_sigma)
            opt.step(lr)
            total += loss * len(batch)
        train_loss = total / len(pairs)

        row = {"epoch": epoch, "lr": lr, "train_loss": train_loss,
               "val_loss": "", "val_psnr": "", "val_ssim": ""}
        if val_pairs:
            val_loss, val_psnr, val_ssim = evaluate(model, val_in, val_tg)
            row.update(val_loss=val_loss, val_psnr=val_psnr, val_ssim=val_ssim)
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_state = model.store.state_dict()
        history.append(row)

    if best_state is not None:
        model.store.load_state_dict(best_state)
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(history[0].keys()))
            writer.writeheader()
            writer.writerows(history)
    return TrainResult(history=history, best_epoch=best_epoch,
                       best_val_loss=float(best_val))


def evaluate(model: UnfoldingModel, inputs2, targets2, batch_size=10):
    """Mean loss / PSNR / SSIM of the model over normalized pairs."""
    losses, psnrs, ssims = [], [], []
    for start in range(0, len(inputs2), batch_size):
        chunk_in = inputs2[start : start + batch_size]
        chunk_tg = targets2[start : start + batch_size]
        sigma, _ = model.forward_pass(channels_to_complex(chunk_in))
        loss, _ = _amplitude_mse_grad(sigma, chunk_tg, want_grad=False)
        losses.append(loss * len(chunk_in))
        out_z = channels_to_complex(sigma)
        tg_z = channels_to_complex(chunk_tg)
        for i in range(len(chunk_in)):
            a = amplitude_normalized(tg_z[i])
            b = amplitude_normalized(out_z[i])
            psnrs.append(psnr(a, b))
            ssims.append(ssim(a, b))
    n = len(inputs2)
    return sum(losses) / n, float(np.mean(psnrs)), float(np.mean(ssims))


def infer(model: UnfoldingModel, distorted):
    """Normalize, run the stages, undo the normalization.

    Accepts one grid or a batch; returns (focused image(s), screen(s),
    normalization record(s)) with the input's layout preserved.
    """
    z = np.asarray(distorted, dtype=np.complex128)
    if z.ndim not in (2, 3):
        raise ValueError("expected one grid or a batch of grids")
    single = z.ndim == 2
    batch = z[None] if single else z
    normed = np.empty_like(batch)
    records = []
    for i in range(batch.shape[0]):
        normed[i], rec = normalize_minmax(batch[i])
        records.append(rec)
    sigma2, phi2 = model.forward_pass(normed)
    sigma = channels_to_complex(sigma2)
    phi = channels_to_complex(phi2)
    focused = np.stack([denormalize(sigma[i], records[i]) for i in range(len(records))])
    if single:
        return focused[0], phi[0], records[0]
    return focused, phi, records
