"""Selective (S6) scan over the centroid sequence.

Per step ``t``, channel ``c`` and state ``j``::

    a      = exp(delta[c, t] * A[c, j])                  # zero-order hold
    h[c,j] = a * h[c,j] + delta[c, t] * B[j, t] * x[c, t]  # Euler input term
    y[c,t] = sum_j Cm[j, t] * h[c, j] + D[c] * x[c, t]

with ``h`` starting at zero. ``delta``, ``B`` and ``Cm`` are input-dependent
projections of ``x`` (see :func:`s6_scan`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import instrument
from .autodiff import (
    ContractError,
    ShapeError,
    Tensor,
    active_tape,
    as_tensor,
    parameter,
    record_op,
    softplus,
)
from .nn import ConvSpec, channel_map


@dataclass
class ScanParams:
    A_log: Tensor
    B_proj: ConvSpec
    C_proj: ConvSpec
    delta_proj: ConvSpec
    D_skip: Tensor
    N: int

    @classmethod
    def init(cls, channels: int, state_dim: int = 16, rng=None) -> "ScanParams":
        rng = np.random.default_rng(0) if rng is None else rng
        a = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (channels, 1))
        return cls(
            A_log=parameter(np.log(a)),
            B_proj=ConvSpec.init(channels, state_dim, 1, rng=rng),
            C_proj=ConvSpec.init(channels, state_dim, 1, rng=rng),
            delta_proj=ConvSpec.init(channels, channels, 1, rng=rng),
            D_skip=parameter(np.ones(channels)),
            N=state_dim,
        )

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    def A(self) -> Tensor:
        return -self.A_log.exp()


def _scan_forward(x, delta, A, B, Cm, D, keep: bool):
    C, L = x.shape
    N = A.shape[1]
    y = np.empty((C, L), dtype=x.dtype)
    h = np.zeros((C, N), dtype=x.dtype)
    hs = np.empty((L, C, N), dtype=x.dtype) if keep else None
    decays = np.empty((L, C, N), dtype=x.dtype) if keep else None
    step_macs = 4 * C * N + 2 * C
    for t in range(L):
        a = np.exp(delta[:, t, None] * A)
        u = delta[:, t] * x[:, t]
        h = a * h + u[:, None] * B[None, :, t]
        y[:, t] = h @ Cm[:, t] + D * x[:, t]
        if keep:
            hs[t] = h
            decays[t] = a
        instrument.add_macs(step_macs)
        instrument.add_transcendentals(C * N)
    return y, hs, decays


def selective_scan(x, delta, A, B, Cm, D) -> Tensor:
    """Fused recurrence kernel.

    Args:
        x: ``[C, L]`` input sequence.
        delta: ``[C, L]`` positive step sizes.
        A: ``[C, N]`` state matrix (negative for stable decay).
        B, Cm: ``[N, L]`` input and output projections per step.
        D: ``[C]`` skip weights.

    Returns:
        ``[C, L]`` outputs.
    """
    x, delta, A, B, Cm, D = (as_tensor(t) for t in (x, delta, A, B, Cm, D))
    if x.ndim != 2:
        raise ShapeError(f"scan input must be [C, L], got {x.shape}")
    C, L = x.shape
    N = A.shape[-1]
    if delta.shape != (C, L) or A.shape != (C, N) or B.shape != (N, L) or Cm.shape != (N, L):
        raise ShapeError("inconsistent selective-scan operand shapes")
    if D.shape != (C,):
        raise ShapeError(f"skip weights must be [{C}], got {D.shape}")
    parents = (x, delta, A, B, Cm, D)
    keep = active_tape() is not None and any(p.requires_grad for p in parents)
    xd, dd, Ad, Bd, Cd, Dd = (p.data for p in parents)
    y, hs, decays = _scan_forward(xd, dd, Ad, Bd, Cd, Dd, keep)

    def bw(g):
        gx = np.empty_like(xd)
        gdelta = np.empty_like(dd)
        gA = np.zeros_like(Ad)
        gB = np.empty_like(Bd)
        gC = np.empty_like(Cd)
        gD = (g * xd).sum(axis=1)
        carry = np.zeros((C, N), dtype=xd.dtype)
        zero = np.zeros((C, N), dtype=xd.dtype)
        for t in range(L - 1, -1, -1):
            gy = g[:, t]
            gh = carry + gy[:, None] * Cd[None, :, t]
            gC[:, t] = hs[t].T @ gy
            ghB = gh @ Bd[:, t]
            gx[:, t] = gy * Dd + ghB * dd[:, t]
            h_prev = hs[t - 1] if t else zero
            gdecay = gh * h_prev * decays[t]
            gdelta[:, t] = (gdecay * Ad).sum(axis=1) + ghB * xd[:, t]
            gA += gdecay * dd[:, t, None]
            gB[:, t] = (dd[:, t] * xd[:, t]) @ gh
            carry = decays[t] * gh
        return gx, gdelta, gA, gB, gC, gD

    return record_op("selective_scan", y, parents, bw)


def s6_scan(seq, params: ScanParams) -> Tensor:
    """Input-dependent scan over the columns of ``seq`` (``[C, n]``) -> ``[C, n]``."""
    x = as_tensor(seq)
    if x.ndim != 2 or x.shape[0] != params.channels:
        raise ShapeError(f"scan expects [{params.channels}, n], got {x.shape}")
    if x.shape[1] < 1:
        raise ContractError("scan needs at least one step")
    delta = softplus(channel_map(params.delta_proj, x))
    B = channel_map(params.B_proj, x)
    Cm = channel_map(params.C_proj, x)
    return selective_scan(x, delta, params.A(), B, Cm, params.D_skip)


def scan_cost(channels: int, length: int, state_dim: int) -> int:
    """Exact multiply-accumulates of :func:`s6_scan` (projections plus kernel)."""
    if min(channels, length, state_dim) < 0:
        raise ContractError("scan dimensions must be non-negative")
    C, n, N = channels, length, state_dim
    return n * (C * C + 6 * C * N + 2 * C)


def scan_transcendentals(channels: int, length: int, state_dim: int) -> int:
    C, n, N = channels, length, state_dim
    if n == 0:
        return 0
    return n * C + C * N + n * C * N
