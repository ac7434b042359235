"""Convolutional and spectral primitives.

``conv2d`` and ``fft2d_mag_parts`` are primitive tape ops with hand-written
adjoints; layer normalization, the channel maps and the sampling layers are
compositions of :mod:`clusterscan.autodiff` ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import instrument
from .autodiff import ShapeError, Tensor, as_tensor, concat, parameter, record_op

NORM_EPS = 1e-6


@dataclass
class ConvSpec:
    """Convolution hyperparameters plus its learnable weights.

    ``depthwise`` convolutions carry weights of shape ``[C, 1, kh, kw]``.
    """

    in_channels: int
    out_channels: int
    kernel: tuple
    stride: int
    padding: int
    depthwise: bool
    weight: Tensor
    bias: Tensor | None

    @classmethod
    def init(
        cls,
        in_channels: int,
        out_channels: int,
        kernel=1,
        stride: int = 1,
        padding: int | None = None,
        depthwise: bool = False,
        rng: np.random.Generator | None = None,
        bias: bool = True,
    ) -> "ConvSpec":
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        if padding is None:
            padding = kh // 2
        if depthwise and in_channels != out_channels:
            raise ShapeError("depthwise convolution needs in_channels == out_channels")
        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = (1 if depthwise else in_channels) * kh * kw
        bound = 1.0 / np.sqrt(fan_in)
        wshape = (out_channels, 1 if depthwise else in_channels, kh, kw)
        w = parameter(rng.uniform(-bound, bound, size=wshape))
        b = parameter(rng.uniform(-bound, bound, size=out_channels)) if bias else None
        return cls(in_channels, out_channels, (kh, kw), stride, padding, depthwise, w, b)

    @property
    def groups(self) -> int:
        return self.in_channels if self.depthwise else 1

    def param_count(self) -> int:
        return self.weight.size + (self.bias.size if self.bias is not None else 0)

    def output_hw(self, h: int, w: int) -> tuple:
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1

    def macs(self, batch: int, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        kh, kw = self.kernel
        cin = 1 if self.depthwise else self.in_channels
        return batch * self.out_channels * cin * kh * kw * ho * wo


@dataclass
class NormSpec:
    normalized_channels: int
    gamma: Tensor
    beta: Tensor
    epsilon: float = NORM_EPS

    @classmethod
    def init(cls, channels: int, epsilon: float = NORM_EPS) -> "NormSpec":
        return cls(channels, parameter(np.ones(channels)), parameter(np.zeros(channels)), epsilon)

    def param_count(self) -> int:
        return self.gamma.size + self.beta.size


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def _window(xp, i, j, stride, ho, wo):
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def conv2d_raw(x, weight, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation on ``[B, C, H, W]`` with zero padding.

    Only ``groups == 1`` and depthwise (``groups == C``) are supported.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = weight.shape
    depthwise = groups != 1
    if depthwise and (groups != C or O != C or Cg != 1):
        raise ShapeError("only depthwise grouping is supported")
    if not depthwise and Cg != C:
        raise ShapeError(f"conv2d expects {Cg} input channels, got {C}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(f"input {H}x{W} smaller than kernel {kh}x{kw}")
    s, p = stride, padding
    ho, wo = (H + 2 * p - kh) // s + 1, (W + 2 * p - kw) // s + 1
    xd, wd = x.data, weight.data
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    instrument.add_macs(B * O * Cg * kh * kw * ho * wo)

    if depthwise:
        out = np.zeros((B, C, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += _window(xp, i, j, s, ho, wo) * wd[None, :, 0, i, j, None, None]
    elif kh == kw == 1 and s == 1 and p == 0:
        cols = xd.reshape(B, C, H * W)
        out = np.matmul(wd.reshape(O, C), cols).reshape(B, O, ho, wo)
    else:
        cols = np.empty((B, C, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = _window(xp, i, j, s, ho, wo)
        cols = cols.reshape(B, C * kh * kw, ho * wo)
        out = np.matmul(wd.reshape(O, -1), cols).reshape(B, O, ho, wo)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]

    def bw(g):
        gw = gx = gb = None
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if depthwise:
            gxp = np.zeros_like(xp) if x.requires_grad else None
            gw = np.zeros_like(wd) if weight.requires_grad else None
            for i in range(kh):
                for j in range(kw):
                    if gw is not None:
                        gw[:, 0, i, j] = (g * _window(xp, i, j, s, ho, wo)).sum(axis=(0, 2, 3))
                    if gxp is not None:
                        _window(gxp, i, j, s, ho, wo)[...] += g * wd[None, :, 0, i, j, None, None]
        else:
            g2 = g.reshape(B, O, ho * wo)
            if weight.requires_grad:
                gw = np.einsum("bol,bkl->ok", g2, cols).reshape(wd.shape)
            gxp = None
            if x.requires_grad:
                gcols = np.matmul(wd.reshape(O, -1).T, g2)
                if kh == kw == 1 and s == 1 and p == 0:
                    gxp = gcols.reshape(B, C, H, W)
                else:
                    gcols = gcols.reshape(B, C, kh, kw, ho, wo)
                    gxp = np.zeros_like(xp)
                    for i in range(kh):
                        for j in range(kw):
                            _window(gxp, i, j, s, ho, wo)[...] += gcols[:, :, i, j]
        if gxp is not None:
            gx = gxp[:, :, p : p + H, p : p + W] if p else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv2d", out, parents, lambda g: bw(g)[: len(parents)])


def conv2d(x, spec: ConvSpec) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv expects {spec.in_channels} channels, got shape {x.shape}")
    return conv2d_raw(x, spec.weight, spec.bias, spec.stride, spec.padding, spec.groups)


def channel_map(spec: ConvSpec, x) -> Tensor:
    """Apply a 1x1 channel map to a ``[C, L]`` matrix of column vectors."""
    x = as_tensor(x)
    if spec.kernel != (1, 1) or spec.depthwise:
        raise ShapeError("channel_map needs a dense 1x1 spec")
    if x.ndim != 2 or x.shape[0] != spec.in_channels:
        raise ShapeError(f"channel_map expects [{spec.in_channels}, L], got {x.shape}")
    out = spec.weight.reshape(spec.out_channels, spec.in_channels) @ x
    if spec.bias is not None:
        out = out + spec.bias.reshape(spec.out_channels, 1)
    return out


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def layer_norm(x, spec: NormSpec) -> Tensor:
    """Normalize each ``[:, :, h, w]`` channel vector, then apply the affine map."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != spec.normalized_channels:
        raise ShapeError(f"layer_norm expects {spec.normalized_channels} channels, got {x.shape}")
    return _normalize(x, axis=1, gamma=spec.gamma, beta=spec.beta, eps=spec.epsilon)


def _normalize(x, axis, gamma, beta, eps):
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    y = xc / (var + eps).sqrt()
    shape = [1] * x.ndim
    shape[axis] = -1
    return y * gamma.reshape(shape) + beta.reshape(shape)


# ---------------------------------------------------------------------------
# Spectral
# ---------------------------------------------------------------------------


def fft2d_mag_parts(x) -> tuple:
    """Unnormalized forward 2-D DFT over the last two axes, as (real, imag).

    Both parts are differentiable; the adjoint of a real-input DFT is
    ``Re(DFT(conj(G)))`` with ``G = g_real + i g_imag``.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("fft2d needs at least two axes")
    h, w = x.shape[-2:]
    spec = np.fft.fft2(x.data, axes=(-2, -1))
    lead = int(np.prod(x.shape[:-2], dtype=np.int64))
    instrument.add_macs(lead * (2 * h * h * w + 4 * h * w * w))
    dtype = x.dtype
    real = record_op("fft2.real", spec.real.astype(dtype), (x,),
                     lambda g: (np.fft.fft2(g, axes=(-2, -1)).real.astype(dtype),))
    imag = record_op("fft2.imag", spec.imag.astype(dtype), (x,),
                     lambda g: (np.fft.fft2(-1j * g, axes=(-2, -1)).real.astype(dtype),))
    return real, imag


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def downsample_spec(channels: int, rng=None) -> ConvSpec:
    return ConvSpec.init(channels, 2 * channels, kernel=3, stride=2, padding=1, rng=rng)


def upsample_spec(channels: int, rng=None) -> ConvSpec:
    return ConvSpec.init(channels, 2 * channels, kernel=1, padding=0, rng=rng)


def downsample(x, spec: ConvSpec) -> Tensor:
    """Stride-2 3x3 convolution: ``[B, C, H, W] -> [B, 2C, H/2, W/2]``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample needs even spatial extents, got {x.shape}")
    return conv2d(x, spec)


def pixel_shuffle(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    r = factor
    if C % (r * r):
        raise ShapeError(f"{C} channels not divisible by {r * r}")
    y = x.reshape(B, C // (r * r), r, r, H, W).transpose(0, 1, 4, 2, 5, 3)
    return y.reshape(B, C // (r * r), H * r, W * r)


def upsample(x, spec: ConvSpec) -> Tensor:
    """1x1 conv to 2C then depth-to-space: ``[B, C, H, W] -> [B, C/2, 2H, 2W]``."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] % 2:
        raise ShapeError(f"upsample needs an even channel count, got {x.shape}")
    return pixel_shuffle(conv2d(x, spec), 2)


def concat_channels(tensors) -> Tensor:
    return concat(tensors, axis=1)
