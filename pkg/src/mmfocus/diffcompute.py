"""Hand-rolled differentiable primitives for the unfolding network.

There is no tape: every layer caches what its own backward rule needs,
and the network modules call backward in exact reverse of forward order.
Real activations are numpy arrays shaped (batch, channels, rows, cols).
Complex grids travel as 2-channel real tensors (channel 0 the real part,
channel 1 the imaginary part) so convolutional blocks can mix them freely.

Parameters live in a ParamStore with same-shaped gradient slots.  Layers
default to float32 storage; reductions (bias gradients, normalization
statistics, scalar-threshold gradients) accumulate in float64 before
casting back.  Everything runs identically under float64 for tight
finite-difference verification.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as sigmoid

from .core import fft2, ifft2


def softplus(x):
    """log(1 + e^x), overflow-safe for large positive x."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def inv_softplus(y):
    """Inverse of softplus; y must be strictly positive."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("inv_softplus needs strictly positive input")
    return y + np.log1p(-np.exp(-y))


class Param:
    """A named array with a matching gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Insertion-ordered registry of parameters and their gradients."""

    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def create(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def params(self) -> list[Param]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.value.shape}")
            p.value[...] = arr.astype(p.value.dtype)


def _gather_cols(padded, ksize, stride, out_rows, out_cols):
    """Window extraction: (n, c, hp, wp) -> (n*out_rows*out_cols, c*k*k)."""
    n, c, _, _ = padded.shape
    sn, sc, sh, sw = padded.strides
    view = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, out_rows, out_cols, ksize, ksize),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    stacked = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return stacked.reshape(n * out_rows * out_cols, c * ksize * ksize)


def _scatter_cols(cols, padded_shape, ksize, stride, out_rows, out_cols):
    """Adjoint of _gather_cols: scatter-add windows back into a padded buffer."""
    n, c, _, _ = padded_shape
    contrib = cols.reshape(n, out_rows, out_cols, c, ksize, ksize)
    buf = np.zeros(padded_shape, dtype=cols.dtype)
    for ki in range(ksize):
        for kj in range(ksize):
            buf[
                :, :, ki : ki + stride * out_rows : stride, kj : kj + stride * out_cols : stride
            ] += contrib[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    return buf


class Conv2d:
    """Cross-correlation with bias; 'same' zero padding, stride 1 or 2.

    Stride 2 keeps the (k-1)//2 padding, which exactly halves even input
    dims.  Weights are He-normal when an rng is given, zero otherwise.
    """

    def __init__(self, store, prefix, in_channels, out_channels, kernel_size,
                 stride=1, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            scale = np.sqrt(2.0 / (in_channels * kernel_size**2))
            w = (rng.standard_normal(shape) * scale).astype(dtype)
        self.weight = store.create(f"{prefix}.weight", w)
        self.bias = store.create(f"{prefix}.bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _gather_cols(padded, k, s, ho, wo)
        out = cols @ self.weight.value.reshape(self.out_channels, -1).T
        out += self.bias.value
        self._cache = (x.shape, cols, ho, wo)
        return out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, gy):
        xshape, cols, ho, wo = self._cache
        self._cache = None
        n, c, h, w = xshape
        k, s, p = self.kernel_size, self.stride, self.padding
        gy_flat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        self.weight.grad += (gy_flat.T @ cols).reshape(self.weight.value.shape)
        self.bias.grad += gy_flat.sum(axis=0, dtype=np.float64).astype(self.bias.value.dtype)
        dcols = gy_flat @ self.weight.value.reshape(self.out_channels, -1)
        dpadded = _scatter_cols(dcols, (n, c, h + 2 * p, w + 2 * p), k, s, ho, wo)
        return dpadded[:, :, p : p + h, p : p + w]


class ConvTranspose2d:
    """Exact adjoint of the stride-2 Conv2d, plus bias; doubles spatial dims.

    Weight shape is (in_channels, out_channels, k, k): the same array,
    read the other way round, defines the downsampling convolution whose
    adjoint this layer applies.
    """

    def __init__(self, store, prefix, in_channels, out_channels, kernel_size=3,
                 stride=2, rng=None, dtype=np.float32):
        if kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if stride != 2:
            raise ValueError("only stride 2 is supported")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            scale = np.sqrt(2.0 / (in_channels * kernel_size**2))
            w = (rng.standard_normal(shape) * scale).astype(dtype)
        self.weight = store.create(f"{prefix}.weight", w)
        self.bias = store.create(f"{prefix}.bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        k, s = self.kernel_size, self.stride
        p = (k - 1) // 2
        ho, wo = h * s, w * s
        x_flat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, c)
        cols = x_flat @ self.weight.value.reshape(c, -1)
        buf = _scatter_cols(cols, (n, self.out_channels, ho + 2 * p, wo + 2 * p), k, s, h, w)
        out = buf[:, :, p : p + ho, p : p + wo]
        out += self.bias.value[None, :, None, None]
        self._cache = (x_flat, (n, h, w))
        return out

    def backward(self, gy):
        x_flat, (n, h, w) = self._cache
        self._cache = None
        k, s = self.kernel_size, self.stride
        p = (k - 1) // 2
        gpadded = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p)))
        g_cols = _gather_cols(gpadded, k, s, h, w)
        self.weight.grad += (x_flat.T @ g_cols).reshape(self.weight.value.shape)
        self.bias.grad += gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(self.bias.value.dtype)
        gx = g_cols @ self.weight.value.reshape(self.in_channels, -1).T
        return gx.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2)


class ReLU:
    """max(x, 0); the subgradient at 0 is taken as 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, gy):
        mask = self._mask
        self._mask = None
        return gy * mask


class InstanceNorm2d:
    """Per-sample, per-channel spatial standardization with learned affine."""

    def __init__(self, store, prefix, channels, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.scale = store.create(f"{prefix}.scale", np.ones(channels, dtype=dtype))
        self.shift = store.create(f"{prefix}.shift", np.zeros(channels, dtype=dtype))
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        mean = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        var = np.square(x.astype(np.float64) - mean).mean(axis=(2, 3), keepdims=True)
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.astype(x.dtype)) * inv
        self._cache = (xhat, inv)
        return self.scale.value[None, :, None, None] * xhat + self.shift.value[None, :, None, None]

    def backward(self, gy):
        xhat, inv = self._cache
        self._cache = None
        _, _, h, w = gy.shape
        area = h * w
        self.shift.grad += gy.sum(axis=(0, 2, 3), dtype=np.float64).astype(self.shift.value.dtype)
        self.scale.grad += (gy * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(
            self.scale.value.dtype
        )
        gxhat = gy * self.scale.value[None, :, None, None]
        s1 = gxhat.sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(gy.dtype)
        s2 = (gxhat * xhat).sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(gy.dtype)
        return inv * (gxhat - s1 / area - xhat * (s2 / area))


class SoftThresholdLearnable:
    """sign(x) * max(|x| - softplus(theta), 0) per real channel.

    The raw scalar theta is the parameter; softplus keeps the effective
    threshold positive no matter where training pushes it.
    """

    def __init__(self, store, name, threshold=0.01, raw_value=None, dtype=np.float32):
        raw = float(inv_softplus(threshold)) if raw_value is None else float(raw_value)
        self.theta = store.create(name, np.asarray(raw, dtype=dtype))
        self._cache = None

    def threshold(self) -> float:
        return float(softplus(float(self.theta.value)))

    def forward(self, x):
        t = self.threshold()
        mask = np.abs(x) > t
        signed_mask = np.sign(x) * mask
        self._cache = (mask, signed_mask)
        return signed_mask * (np.abs(x) - t)

    def backward(self, gy):
        mask, signed_mask = self._cache
        self._cache = None
        raw = float(self.theta.value)
        slope = float(sigmoid(raw))
        self.theta.grad += np.asarray(
            -float((gy * signed_mask).sum(dtype=np.float64)) * slope,
            dtype=self.theta.value.dtype,
        )
        return gy * mask


def complex_to_channels(z):
    """(n, h, w) complex -> (n, 2, h, w) real."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-3)


def channels_to_complex(t):
    """(n, 2, h, w) real -> (n, h, w) complex."""
    t = np.asarray(t)
    if t.shape[-3] != 2:
        raise ValueError("expected a 2-channel tensor")
    return t[..., 0, :, :] + 1j * t[..., 1, :, :]


class SpectralFilter:
    """C-linear map z -> ifft2(fft2(z) * filt) on 2-channel tensors.

    The adjoint of this map under the real inner product is the same
    sandwich with the conjugated filter, so backward needs no cache and
    the layer can be reused many times inside one forward pass.
    """

    def __init__(self, filt):
        self.filt = np.asarray(filt, dtype=np.complex128)

    def _apply(self, t, filt):
        z = channels_to_complex(t)
        out = ifft2(fft2(z) * filt)
        return complex_to_channels(out).astype(t.dtype)

    def forward(self, x):
        return self._apply(x, self.filt)

    def backward(self, gy):
        return self._apply(gy, np.conj(self.filt))


class ComplexMultiply:
    """Elementwise product of two complex grids held as 2-channel tensors."""

    def __init__(self):
        self._cache = None

    def forward(self, a, b):
        za = channels_to_complex(a)
        zb = channels_to_complex(b)
        self._cache = (za, zb, a.dtype)
        return complex_to_channels(za * zb).astype(a.dtype)

    def backward(self, gy):
        za, zb, dtype = self._cache
        self._cache = None
        g = channels_to_complex(gy)
        ga = complex_to_channels(g * np.conj(zb)).astype(dtype)
        gb = complex_to_channels(g * np.conj(za)).astype(dtype)
        return ga, gb


class UnitModulus:
    """Normalize complex cells to unit magnitude; near-zero cells become 1.

    Cells below the 1e-12 cutoff are constants in the forward map, so
    their gradient is zero.
    """

    def __init__(self):
        self._cache = None

    def forward(self, x):
        z = channels_to_complex(x)
        r = np.abs(z)
        small = r < 1e-12
        safe_r = np.where(small, 1.0, r)
        v = np.where(small, 1.0 + 0.0j, z / safe_r)
        self._cache = (v, safe_r, small, x.dtype)
        return complex_to_channels(v).astype(x.dtype)

    def backward(self, gy):
        v, safe_r, small, dtype = self._cache
        self._cache = None
        g = channels_to_complex(gy)
        gz = g / safe_r - v * (np.real(np.conj(v) * g) / safe_r)
        gz = np.where(small, 0.0 + 0.0j, gz)
        return complex_to_channels(gz).astype(dtype)


class Amplitude:
    """Stabilized magnitude sqrt(re^2 + im^2 + 1e-12); drops the channel axis."""

    STAB = 1e-12

    def __init__(self):
        self._cache = None

    def forward(self, x):
        a = np.sqrt(x[..., 0, :, :] ** 2 + x[..., 1, :, :] ** 2 + self.STAB)
        self._cache = (x, a)
        return a

    def backward(self, ga):
        x, a = self._cache
        self._cache = None
        scaled = ga / a
        return np.stack([scaled * x[..., 0, :, :], scaled * x[..., 1, :, :]], axis=-3)


def gradient_check(forward_fn, grad_fn, variables, eps=None, n_directions=3, seed=0):
    """Max relative error of analytic vs central-difference derivatives.

    forward_fn() returns the scalar loss for the current variable values;
    grad_fn() returns gradient arrays aligned with `variables`.  Each
    round draws a random unit direction per variable, perturbs the
    variables in place by +-eps along it, and compares the differenced
    loss slope against the analytic inner product.  Variables are
    restored afterwards.
    """
    if not variables:
        raise ValueError("need at least one variable to perturb")
    finest = min(np.dtype(v.dtype).itemsize for v in variables)
    if eps is None:
        eps = 1e-3 if finest >= 8 else 1e-2
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_directions):
        directions = []
        for v in variables:
            d = rng.standard_normal(v.shape)
            norm = float(np.linalg.norm(d))
            if norm > 0:
                d = d / norm
            directions.append(d)
        grads = grad_fn()
        if len(grads) != len(variables):
            raise ValueError("grad_fn must return one gradient per variable")
        analytic = sum(
            float(np.vdot(np.asarray(g, dtype=np.float64), d))
            for g, d in zip(grads, directions)
        )
        originals = [v.copy() for v in variables]
        for v, o, d in zip(variables, originals, directions):
            v[...] = (o.astype(np.float64) + eps * d).astype(v.dtype)
        f_plus = float(forward_fn())
        for v, o, d in zip(variables, originals, directions):
            v[...] = (o.astype(np.float64) - eps * d).astype(v.dtype)
        f_minus = float(forward_fn())
        for v, o in zip(variables, originals):
            v[...] = o
        numeric = (f_plus - f_minus) / (2.0 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
