"""Feature aggregating: centroid initialization, similarity PDFs, gated refinement.

All functions take a single feature map ``F`` of shape ``[C, H, W]``; pixels are
flattened row-major so pixel ``p`` is ``(p // W, p % W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, ShapeError, Tensor, as_tensor, parameter, relu, sigmoid
from .nn import ConvSpec, channel_map

SIM_EPS = 1e-8
PDF_EPS = 1e-8


@dataclass
class AggregatorParams:
    value_proj: ConvSpec
    pixel_proj: ConvSpec
    alpha_gate: Tensor
    beta_gate: Tensor
    n: int
    knn_k: int = 3

    @classmethod
    def init(cls, channels: int, n: int, knn_k: int = 3, rng=None) -> "AggregatorParams":
        if n < 1:
            raise ContractError("need at least one centroid")
        if knn_k < 1 or knn_k % 2 == 0:
            raise ContractError("knn_k must be a positive odd window size")
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            value_proj=ConvSpec.init(channels, channels, 1, rng=rng),
            pixel_proj=ConvSpec.init(channels, channels, 1, rng=rng),
            alpha_gate=parameter(1.0),
            beta_gate=parameter(0.0),
            n=n,
            knn_k=knn_k,
        )


@dataclass
class CentroidSet:
    initial: Tensor
    refined: Tensor
    pdf: Tensor
    raw_sim: Tensor
    alpha_gate: Tensor
    beta_gate: Tensor
    norm_factors: Tensor


def sample_positions(num_pixels: int, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` distinct flat pixel indices with a partial Fisher-Yates shuffle."""
    if n > num_pixels:
        raise ContractError(f"cannot draw {n} centroids from {num_pixels} pixels")
    rng = np.random.default_rng(seed)
    swapped: dict[int, int] = {}
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        j = int(rng.integers(i, num_pixels))
        vi, vj = swapped.get(i, i), swapped.get(j, j)
        swapped[j] = vi
        swapped[i] = vj
        out[i] = vj
    return out


def neighborhood_indices(positions: np.ndarray, height: int, width: int, knn_k: int) -> np.ndarray:
    """Flat indices of the border-clamped ``knn_k x knn_k`` window around each position."""
    r = knn_k // 2
    offs = np.arange(-r, r + 1)
    rows = np.clip(positions[:, None, None] // width + offs[None, :, None], 0, height - 1)
    cols = np.clip(positions[:, None, None] % width + offs[None, None, :], 0, width - 1)
    return (rows * width + cols).reshape(len(positions), knn_k * knn_k)


def init_centroids(F, n: int, seed: int, knn_k: int = 3) -> Tensor:
    """Mean feature over the clamped neighborhood of ``n`` seeded random pixels -> ``[C, n]``."""
    F = as_tensor(F)
    if F.ndim != 3:
        raise ShapeError(f"expected [C, H, W], got {F.shape}")
    C, H, W = F.shape
    pos = sample_positions(H * W, n, seed)
    idx = neighborhood_indices(pos, H, W, knn_k)
    gathered = F.reshape(C, H * W)[:, idx.reshape(-1)]
    return gathered.reshape(C, n, knn_k * knn_k).mean(axis=2)


def _guarded_norm(x, axis):
    return ((x * x).sum(axis=axis) + SIM_EPS * SIM_EPS).sqrt()


def similarity_distribution(F, centroids) -> tuple:
    """Cosine similarities ``[n, HW]`` and the rectified per-centroid PDFs over pixels.

    The guard enters each norm as ``sqrt(|v|^2 + eps^2)`` so zero vectors give a
    similarity of 0 with a finite gradient. PDF rows are
    ``(max(sim, 0) + eps) / sum_p (max(sim, 0) + eps)``.
    """
    F, centroids = as_tensor(F), as_tensor(centroids)
    C = F.shape[0]
    if centroids.ndim != 2 or centroids.shape[0] != C:
        raise ShapeError(f"centroids {centroids.shape} do not match {C} channels")
    hw = int(np.prod(F.shape[1:]))
    flat = F.reshape(C, hw)
    f_norm = _guarded_norm(flat, 0)
    c_norm = _guarded_norm(centroids, 0)
    dots = centroids.T @ flat
    raw = dots / (c_norm.reshape(-1, 1) * f_norm.reshape(1, hw))
    mass = relu(raw) + PDF_EPS
    pdf = mass / mass.sum(axis=1, keepdims=True)
    return raw, pdf


def refine_centroids(F, centroids, pdf, params: AggregatorParams) -> tuple:
    """One-step gated refinement; returns ``(refined [C', n], norm_factors [n])``.

    ``refined_k = (v_k + sum_p gate_kp * fhat_p) / (1 + sum_p gate_kp)`` with
    ``gate = sigmoid(alpha * pdf + beta)``.
    """
    F, centroids, pdf = as_tensor(F), as_tensor(centroids), as_tensor(pdf)
    C = F.shape[0]
    flat = F.reshape(C, -1)
    gate = sigmoid(params.alpha_gate * pdf + params.beta_gate)
    mass = gate.sum(axis=1)
    # The pixel map is affine, so project the gated sum instead of every pixel.
    pooled = gate @ flat.T
    proj = params.pixel_proj
    projected = proj.weight.reshape(proj.out_channels, proj.in_channels) @ pooled.T
    if proj.bias is not None:
        projected = projected + proj.bias.reshape(-1, 1) * mass.reshape(1, -1)
    values = channel_map(params.value_proj, centroids)
    norm_factors = mass + 1.0
    refined = (values + projected) / norm_factors.reshape(1, -1)
    return refined, norm_factors


def feature_aggregate(F, params: AggregatorParams, seed: int) -> CentroidSet:
    F = as_tensor(F)
    initial = init_centroids(F, params.n, seed, params.knn_k)
    raw, pdf = similarity_distribution(F, initial)
    refined, norm_factors = refine_centroids(F, initial, pdf, params)
    return CentroidSet(initial, refined, pdf, raw, params.alpha_gate, params.beta_gate, norm_factors)
