"""Score diffusing: softmax assignment of pixels to centroids and weight inversion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, parameter


@dataclass
class DiffuseParams:
    sharp_alpha: Tensor
    sharp_beta: Tensor

    @classmethod
    def init(cls) -> "DiffuseParams":
        return cls(parameter(1.0), parameter(0.0))


@dataclass
class AssignmentField:
    """Per-pixel assignment distribution ``alpha [HW, n]`` over centroids."""

    alpha: Tensor
    sharp_alpha: Tensor
    sharp_beta: Tensor


def assign(pdf, sharp_alpha, sharp_beta) -> AssignmentField:
    """Softmax over centroids of ``sharp_alpha * pdf[k, p] + sharp_beta``.

    The shift ``sharp_beta`` cancels analytically; it is kept as a parameter and
    receives a (numerically) zero gradient.
    """
    pdf = as_tensor(pdf)
    sharp_alpha, sharp_beta = as_tensor(sharp_alpha), as_tensor(sharp_beta)
    scaled = sharp_alpha * pdf
    # Detached max: softmax is shift invariant, so this leaves gradients exact.
    # The shift enters as beta - detach(beta): same value and graph, but a large
    # beta never rounds away the low bits of the scaled pdf in 32-bit.
    shifted = (scaled - np.max(scaled.data, axis=0, keepdims=True)) + (sharp_beta - sharp_beta.detach())
    e = shifted.exp()
    alpha = (e / e.sum(axis=0, keepdims=True)).T
    return AssignmentField(alpha, sharp_alpha, sharp_beta)


def invert_weights(field: AssignmentField, W) -> Tensor:
    """Per-pixel expectation of the centroid weights: ``[C, n] -> [C, HW]``."""
    W = as_tensor(W)
    alpha = field.alpha
    if W.ndim != 2 or W.shape[1] != alpha.shape[1]:
        raise ShapeError(f"weights {W.shape} do not match {alpha.shape[1]} centroids")
    return W @ alpha.T


def sd_apply(scan_input, pdf, W, params: DiffuseParams) -> Tensor:
    """Modulate ``scan_input`` (``[C, H, W]``) by the diffused per-pixel weights."""
    scan_input = as_tensor(scan_input)
    field = assign(pdf, params.sharp_alpha, params.sharp_beta)
    w_pix = invert_weights(field, W)
    if w_pix.shape[0] != scan_input.shape[0] or w_pix.shape[1] != int(np.prod(scan_input.shape[1:])):
        raise ShapeError(f"weights {w_pix.shape} do not cover input {scan_input.shape}")
    return scan_input * w_pix.reshape(scan_input.shape)
