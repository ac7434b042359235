"""Finite-difference audits of every differentiable operator.

Each audit builds a scalar function of some leaf tensors (non-scalar outputs
go through a fixed random linear head). Probes compare the tape gradient
with central differences using steps ``h_i = cbrt(eps) * max(1, |x_i|)``;
see :func:`audit` for the error measure. An audit reports its worst probe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .aggregate import AggregatorParams, feature_aggregate, refine_centroids, similarity_distribution
from .autodiff import Tape, Tensor, no_grad, parameter, precision
from .blocks import CCSMBlock, DecoderBlock, FFNBlock, SCFMBlock, ccsm_forward, ffn_forward, run_decoder, scfm_forward
from .diffuse import DiffuseParams, assign, invert_weights, sd_apply
from .network import build, forward, loss, parameters, smoke_config
from .nn import ConvSpec, NormSpec, conv2d, downsample, downsample_spec, fft2d_mag_parts, layer_norm
from .nn import upsample, upsample_spec
from .scan import ScanParams, s6_scan, selective_scan

TOLERANCE = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-3}
PROBE_WIDTH = 32


@dataclass
class AuditResult:
    name: str
    worst: float
    tolerance: float
    probes: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst)) and self.worst < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<24} worst rel. err {self.worst:.3e}  (tol {self.tolerance:.0e}, {self.probes} probes)"


def _head(out: Tensor, rng) -> Callable:
    """A fixed random linear functional, turning any output into a scalar."""
    w = ad.as_tensor(rng.standard_normal(out.shape))
    return lambda t: (t * w).sum()


def _leaf(rng, *shape, low=None, high=None):
    if low is not None:
        return parameter(rng.uniform(low, high, size=shape))
    return parameter(rng.standard_normal(shape))


def _away_from_zero(rng, *shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return parameter(x)


def _scalarize(rng, make: Callable, inputs: list):
    """Wrap ``make()`` (returning a tensor or tuple of tensors) into a scalar function."""
    with no_grad():
        outs = make()
    outs = outs if isinstance(outs, tuple) else (outs,)
    heads = [_head(o, rng) for o in outs]

    def fn():
        res = make()
        res = res if isinstance(res, tuple) else (res,)
        total = heads[0](res[0])
        for h, r in zip(heads[1:], res[1:]):
            total = total + h(r)
        return total

    return fn, inputs


def _spec_leaves(*specs):
    out = []
    for s in specs:
        out.append(s.weight)
        if s.bias is not None:
            out.append(s.bias)
    return out


# ---------------------------------------------------------------------------
# Audit builders: rng -> (scalar function, list of leaf tensors)
# ---------------------------------------------------------------------------


def _binary(op):
    def b(rng):
        a = _leaf(rng, 3, 4)
        if op == "div":
            c = _away_from_zero(rng, 1, 4, margin=0.5)
        else:
            c = _leaf(rng, 1, 4)
        return _scalarize(rng, lambda: ad.elementwise(op, a, c), [a, c])

    return b


def _unary(op):
    def b(rng):
        if op in ("log", "sqrt"):
            a = _leaf(rng, 3, 5, low=0.5, high=2.0)
        elif op in ("relu", "abs"):
            a = _away_from_zero(rng, 3, 5)
        else:
            a = _leaf(rng, 3, 5)
        return _scalarize(rng, lambda: ad.elementwise(op, a), [a])

    return b


def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return _scalarize(rng, lambda: a @ b, [a, b])


def _reduce(op):
    def b(rng):
        # Distinct, well separated entries keep max away from ties.
        x = parameter((rng.permutation(24) * 0.3 + rng.uniform(0, 0.05, 24)).reshape(2, 3, 4))
        return _scalarize(rng, lambda: ad.reduce(op, x, axis=1) * 1.0 + ad.reduce(op, x) * 1.0, [x])

    return b


def _shape_ops(rng):
    a, c = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 1, 4)

    def make():
        y = ad.concat([a, c], axis=1).transpose(2, 0, 1).reshape(4, 8)
        z = ad.stack([y[1:3], y[[0, 0]]], axis=0)
        return z * z

    return _scalarize(rng, make, [a, c])


def _conv(kind):
    def b(rng):
        x = _leaf(rng, 2, 4, 6, 6)
        if kind == "dense":
            spec = ConvSpec.init(4, 3, 3, rng=rng)
            make = lambda: conv2d(x, spec)  # noqa: E731
        elif kind == "pointwise":
            spec = ConvSpec.init(4, 5, 1, rng=rng)
            make = lambda: conv2d(x, spec)  # noqa: E731
        elif kind == "depthwise":
            spec = ConvSpec.init(4, 4, 3, depthwise=True, rng=rng)
            make = lambda: conv2d(x, spec)  # noqa: E731
        else:
            spec = downsample_spec(4, rng)
            make = lambda: downsample(x, spec)  # noqa: E731
        return _scalarize(rng, make, [x, *_spec_leaves(spec)])

    return b


def _upsample(rng):
    x = _leaf(rng, 1, 4, 3, 3)
    spec = upsample_spec(4, rng)
    return _scalarize(rng, lambda: upsample(x, spec), [x, *_spec_leaves(spec)])


def _layer_norm(rng):
    x = _leaf(rng, 2, 5, 3, 3)
    spec = NormSpec.init(5)
    spec.gamma.data = spec.gamma.data + rng.standard_normal(5).astype(spec.gamma.dtype) * 0.3
    return _scalarize(rng, lambda: layer_norm(x, spec), [x, spec.gamma, spec.beta])


def _fft(rng):
    x = _leaf(rng, 1, 2, 4, 6)
    return _scalarize(rng, lambda: fft2d_mag_parts(x), [x])


def _similarity(rng):
    F, cent = _leaf(rng, 4, 3, 3), _leaf(rng, 4, 3)
    return _scalarize(rng, lambda: similarity_distribution(F, cent), [F, cent])


def _agg_params(rng, C, n):
    p = AggregatorParams.init(C, n, rng=rng)
    p.alpha_gate.data = p.alpha_gate.data + 0.7
    p.beta_gate.data = p.beta_gate.data - 0.4
    return p, [p.alpha_gate, p.beta_gate, *_spec_leaves(p.value_proj, p.pixel_proj)]


def _refine(rng):
    F, cent = _leaf(rng, 4, 3, 3), _leaf(rng, 4, 2)
    pdf = parameter(rng.dirichlet(np.ones(9), size=2))
    params, leaves = _agg_params(rng, 4, 2)
    return _scalarize(rng, lambda: refine_centroids(F, cent, pdf, params), [F, cent, pdf, *leaves])


def _aggregate(rng):
    F = _leaf(rng, 4, 4, 4)
    params, leaves = _agg_params(rng, 4, 3)

    def make():
        cs = feature_aggregate(F, params, seed=11)
        return cs.refined, cs.pdf

    return _scalarize(rng, make, [F, *leaves])


def _scan_kernel(rng):
    C, L, N = 3, 5, 2
    x, Bm, Cm, D = _leaf(rng, C, L), _leaf(rng, N, L), _leaf(rng, N, L), _leaf(rng, C)
    delta = _leaf(rng, C, L, low=0.1, high=1.0)
    A = _leaf(rng, C, N, low=-2.0, high=-0.2)
    return _scalarize(rng, lambda: selective_scan(x, delta, A, Bm, Cm, D), [x, delta, A, Bm, Cm, D])


def _s6(rng):
    seq = _leaf(rng, 4, 5)
    p = ScanParams.init(4, 3, rng=rng)
    leaves = [p.A_log, p.D_skip, *_spec_leaves(p.B_proj, p.C_proj, p.delta_proj)]
    return _scalarize(rng, lambda: s6_scan(seq, p), [seq, *leaves])


def _sharp(rng):
    p = DiffuseParams.init()
    p.sharp_alpha.data = p.sharp_alpha.data + 1.3
    p.sharp_beta.data = p.sharp_beta.data + 0.2
    return p


def _assign(rng):
    pdf = parameter(rng.dirichlet(np.ones(6), size=3))
    p = _sharp(rng)
    return _scalarize(rng, lambda: assign(pdf, p.sharp_alpha, p.sharp_beta).alpha,
                      [pdf, p.sharp_alpha, p.sharp_beta])


def _invert(rng):
    pdf = parameter(rng.dirichlet(np.ones(6), size=3))
    W = _leaf(rng, 4, 3)
    p = _sharp(rng)
    return _scalarize(rng, lambda: invert_weights(assign(pdf, p.sharp_alpha, p.sharp_beta), W),
                      [pdf, W, p.sharp_alpha, p.sharp_beta])


def _sd(rng):
    F = _leaf(rng, 4, 2, 3)
    pdf = parameter(rng.dirichlet(np.ones(6), size=3))
    W = _leaf(rng, 4, 3)
    p = _sharp(rng)
    return _scalarize(rng, lambda: sd_apply(F, pdf, W, p), [F, pdf, W, p.sharp_alpha, p.sharp_beta])


def _perturb(block, rng):
    """Move every leaf away from its (often symmetric) initialization."""
    for t in parameters(block):
        t.data = (t.data + 0.3 * rng.standard_normal(t.shape)).astype(t.dtype)
    return parameters(block)


def _ccsm(rng):
    x = _leaf(rng, 1, 4, 4, 4)
    blk = CCSMBlock.init(4, n=2, state_dim=2, rng=rng)
    leaves = _perturb(blk, rng)
    return _scalarize(rng, lambda: ccsm_forward(x, blk, seed=3), [x, *leaves])


def _scfm(rng):
    x = _leaf(rng, 2, 4, 3, 3)
    blk = SCFMBlock.init(4, reduction=2, rng=rng)
    leaves = _perturb(blk, rng)
    return _scalarize(rng, lambda: scfm_forward(x, blk), [x, *leaves])


def _ffn(rng):
    x = _leaf(rng, 1, 4, 4, 4)
    blk = FFNBlock.init(4, 2, rng=rng)
    leaves = _perturb(blk, rng)
    return _scalarize(rng, lambda: ffn_forward(x, blk), [x, *leaves])


def _decoder(rng):
    x = _leaf(rng, 1, 4, 4, 4)
    blk = DecoderBlock.init(4, n=2, state_dim=2, expansion=2, reduction=4, rng=rng)
    leaves = _perturb(blk, rng)
    return _scalarize(rng, lambda: run_decoder(x, blk, seed=5), [x, *leaves])


def _loss(rng):
    pred = _leaf(rng, 1, 3, 4, 4)
    # Keep every pixel and spectral difference away from the |.| kink.
    target = ad.as_tensor(pred.data - _away_from_zero(rng, 1, 3, 4, 4, margin=0.3).data)

    def fn():
        return loss(pred, target, 0.1)

    with no_grad():
        re, im = fft2d_mag_parts(pred - target)
    if min(np.abs(re.data).min(), np.abs(im.data[np.abs(im.data) > 1e-9]).min(initial=1.0)) < 1e-3:
        target = ad.as_tensor(target.data + 0.01)
    return fn, [pred]


def network_audit(config):
    """End-to-end audit of a (smoke-scale) network built from ``config``."""

    def b(rng):
        model = build(config, seed=int(rng.integers(0, 2**31)))
        leaves = _perturb(model, rng)
        side = config.multiple
        image = parameter(rng.uniform(0, 1, size=(1, 3, side, side)))
        return _scalarize(rng, lambda: forward(model, image, seed=17), [image, *leaves])

    return b


AUDITS: dict = {
    **{op: _binary(op) for op in ("add", "sub", "mul", "div")},
    **{op: _unary(op) for op in ("exp", "log", "sqrt", "abs", "sigmoid", "silu", "relu", "softplus")},
    "matmul": _matmul,
    **{f"reduce_{op}": _reduce(op) for op in ("sum", "mean", "max")},
    "shape_ops": _shape_ops,
    "conv2d": _conv("dense"),
    "conv2d_1x1": _conv("pointwise"),
    "conv2d_depthwise": _conv("depthwise"),
    "downsample": _conv("down"),
    "upsample": _upsample,
    "layer_norm": _layer_norm,
    "fft2d": _fft,
    "similarity": _similarity,
    "refine_centroids": _refine,
    "feature_aggregate": _aggregate,
    "selective_scan": _scan_kernel,
    "s6_scan": _s6,
    "assign": _assign,
    "invert_weights": _invert,
    "sd_apply": _sd,
    "ccsm": _ccsm,
    "scfm": _scfm,
    "ffn": _ffn,
    "decoder_block": _decoder,
    "loss": _loss,
    "network": network_audit(smoke_config()),
}


def _evaluate(fn) -> float:
    with no_grad():
        return float(fn().item())


def _tape_gradients(fn, leaves) -> list:
    with Tape() as tape:
        out = fn()
    for t in leaves:
        t.grad = None
    tape.backward(out)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    for t in leaves:
        t.grad = None
    return grads


def audit(name: str, builder: Callable, probes: int = 10, seed: int = 0, tolerance: float | None = None) -> AuditResult:
    """Run ``probes`` finite-difference probes of one audit at the current precision.

    Each probe moves a random subset of at most :data:`PROBE_WIDTH` leaf
    entries by ``+-h_i`` and compares the tape gradient's directional
    derivative ``a`` with the central difference ``n``. The error is
    ``|a - n| / max(sum_i |g_i h_i|, |n|, floor)``, i.e. relative to the size
    of the probed gradient entries; ``floor = eps**(2/3) * max(1, |f|)`` sits
    just above the rounding noise of ``n``. The differences are always taken
    in 64-bit arithmetic; for a 32-bit build they are evaluated at the same
    (float32-representable) point as the 32-bit tape gradient.
    """
    dtype = np.dtype(ad.get_dtype())
    tolerance = TOLERANCE[dtype] if tolerance is None else tolerance
    fn, leaves = builder(np.random.default_rng(seed))
    grads = _tape_gradients(fn, leaves)
    with precision(64):
        if dtype == np.float64:
            ref_fn, ref_leaves = fn, leaves
        else:
            ref_fn, ref_leaves = builder(np.random.default_rng(seed))
            for r, t in zip(ref_leaves, leaves):
                r.data = t.data.astype(np.float64)
        base = [t.data.copy() for t in ref_leaves]
        sizes = np.array([b.size for b in base])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        step = np.cbrt(np.finfo(np.float64).eps)
        floor = np.finfo(np.float64).eps ** (2 / 3) * max(1.0, abs(_evaluate(ref_fn)))
        rng = np.random.default_rng(seed + 1)
        worst = 0.0
        for _ in range(probes):
            picked = rng.choice(offsets[-1], size=min(PROBE_WIDTH, offsets[-1]), replace=False)
            signs = rng.choice([-1.0, 1.0], size=picked.size)
            dirs = [np.zeros_like(b) for b in base]
            for flat, sign in zip(picked, signs):
                i = int(np.searchsorted(offsets, flat, side="right") - 1)
                j = flat - offsets[i]
                dirs[i].flat[j] = sign * step * max(1.0, abs(base[i].flat[j]))
            terms = [g.astype(np.float64) * d for g, d in zip(grads, dirs)]
            analytic = float(sum(t.sum() for t in terms))
            scale = float(sum(np.abs(t).sum() for t in terms))
            for t, b, d in zip(ref_leaves, base, dirs):
                t.data = b + d
            f_plus = _evaluate(ref_fn)
            for t, b, d in zip(ref_leaves, base, dirs):
                t.data = b - d
            f_minus = _evaluate(ref_fn)
            for t, b in zip(ref_leaves, base):
                t.data = b
            numeric = (f_plus - f_minus) / 2
            err = abs(analytic - numeric) / max(scale, abs(numeric), floor)
            worst = max(worst, err if np.isfinite(err) else np.inf)
    return AuditResult(name, worst, tolerance, probes)


def run_audits(probes: int = 10, bits: int | None = None, names=None, registry: dict | None = None, seed: int = 0) -> list:
    """Run the named audits (all by default) in registry order, at the given precision."""
    registry = AUDITS if registry is None else registry
    selected = list(registry) if names is None else list(names)
    unknown = [n for n in selected if n not in registry]
    if unknown:
        raise KeyError(f"unknown audits: {unknown}")
    with precision(bits if bits is not None else ad.get_dtype()):
        return [audit(n, registry[n], probes, seed) for n in selected]
