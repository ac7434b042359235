"""Token mixer, modulator and feed-forward blocks, and the decoder block built from them.

All blocks map ``[B, C, H, W]`` to the same shape. Residual connections:

* ``ccsm_forward(x) = x + mixer(norm_in(x))``
* ``scfm_forward(x) = x + scfm_modulator(x)``
* ``ffn_forward(x)  = x + contract(silu(dwconv(expand(norm(x)))))``
* ``decoder_block``: ``y = ccsm_forward(x) + scfm_modulator(x)``, then ``ffn_forward(y)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import AggregatorParams, feature_aggregate
from .autodiff import ShapeError, Tensor, as_tensor, concat, sigmoid, silu, stack
from .diffuse import DiffuseParams, sd_apply
from .instrument import scope
from .nn import ConvSpec, NormSpec, conv2d, conv2d_raw, layer_norm
from .scan import ScanParams, s6_scan


@dataclass
class CCSMBlock:
    norm_in: NormSpec
    in_mlp: ConvSpec
    dwconv: ConvSpec
    gate_mlp: ConvSpec
    aggregator: AggregatorParams
    scan: ScanParams
    diffuse: DiffuseParams
    norm_f: NormSpec
    out_proj: ConvSpec

    @classmethod
    def init(cls, channels: int, n: int = 4, state_dim: int = 16, knn_k: int = 3, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            norm_in=NormSpec.init(channels),
            in_mlp=ConvSpec.init(channels, channels, 1, rng=rng),
            dwconv=ConvSpec.init(channels, channels, 3, depthwise=True, rng=rng),
            gate_mlp=ConvSpec.init(channels, channels, 1, rng=rng),
            aggregator=AggregatorParams.init(channels, n, knn_k, rng=rng),
            scan=ScanParams.init(channels, state_dim, rng=rng),
            diffuse=DiffuseParams.init(),
            norm_f=NormSpec.init(channels),
            out_proj=ConvSpec.init(channels, channels, 1, rng=rng),
        )

    @property
    def channels(self) -> int:
        return self.in_mlp.in_channels


@dataclass
class SCFMBlock:
    spatial_conv: ConvSpec
    reduce_conv: ConvSpec
    expand_conv: ConvSpec
    fuse_s: ConvSpec
    fuse_c: ConvSpec

    @classmethod
    def init(cls, channels: int, reduction: int = 4, rng=None):
        if channels % reduction:
            raise ShapeError(f"{channels} channels not divisible by reduction {reduction}")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = channels // reduction
        return cls(
            spatial_conv=ConvSpec.init(2, 1, 7, padding=3, rng=rng),
            reduce_conv=ConvSpec.init(channels, hidden, 1, rng=rng),
            expand_conv=ConvSpec.init(hidden, channels, 1, rng=rng),
            fuse_s=ConvSpec.init(channels, channels, 1, rng=rng),
            fuse_c=ConvSpec.init(channels, channels, 1, rng=rng),
        )


@dataclass
class FFNBlock:
    norm: NormSpec
    expand: ConvSpec
    dwconv: ConvSpec
    contract: ConvSpec
    expansion: int

    @classmethod
    def init(cls, channels: int, expansion: int = 2, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = channels * expansion
        return cls(
            norm=NormSpec.init(channels),
            expand=ConvSpec.init(channels, hidden, 1, rng=rng),
            dwconv=ConvSpec.init(hidden, hidden, 3, depthwise=True, rng=rng),
            contract=ConvSpec.init(hidden, channels, 1, rng=rng),
            expansion=expansion,
        )


@dataclass
class DecoderBlock:
    ccsm: CCSMBlock
    scfm: SCFMBlock
    ffn: FFNBlock

    @classmethod
    def init(cls, channels, n=4, state_dim=16, expansion=2, reduction=4, knn_k=3, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            CCSMBlock.init(channels, n, state_dim, knn_k, rng=rng),
            SCFMBlock.init(channels, reduction, rng=rng),
            FFNBlock.init(channels, expansion, rng=rng),
        )


# ---------------------------------------------------------------------------
# CCSM
# ---------------------------------------------------------------------------


def ccsm_stages(x, block: CCSMBlock, seed: int) -> dict:
    """Run the cluster-centric mixer on ``x`` and return every intermediate.

    Keys: ``F_in`` (normalized input), ``F_d``, ``gate``, ``centroids`` (one
    :class:`~clusterscan.aggregate.CentroidSet` per batch element), ``weights``
    (centroid weights per element), ``modulated``, ``F_f``, ``F_out`` and
    ``out`` (after the output projection, before the residual).
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise ShapeError(f"CCSM expects {block.channels} channels, got {x.shape}")
    with scope("norm_in"):
        f_in = layer_norm(x, block.norm_in)
    with scope("in_mlp"):
        h = conv2d(f_in, block.in_mlp)
    with scope("dwconv"):
        f_d = silu(conv2d(h, block.dwconv))
    with scope("gate"):
        gate = silu(conv2d(f_in, block.gate_mlp))
    centroids, weights, mods = [], [], []
    for b in range(x.shape[0]):
        fb = f_d[b]
        with scope("fa"):
            cs = feature_aggregate(fb, block.aggregator, seed)
        with scope("s6"):
            w = s6_scan(cs.refined, block.scan)
        with scope("sd"):
            mods.append(sd_apply(fb, cs.pdf, w, block.diffuse))
        centroids.append(cs)
        weights.append(w)
    modulated = stack(mods, axis=0)
    with scope("norm_f"):
        f_f = layer_norm(modulated, block.norm_f)
    with scope("out"):
        f_out = f_f * gate
        out = conv2d(f_out, block.out_proj)
    return {
        "F_in": f_in,
        "F_d": f_d,
        "gate": gate,
        "centroids": centroids,
        "weights": weights,
        "modulated": modulated,
        "F_f": f_f,
        "F_out": f_out,
        "out": out,
    }


def ccsm_forward(x, block: CCSMBlock, seed: int) -> Tensor:
    x = as_tensor(x)
    return x + ccsm_stages(x, block, seed)["out"]


# ---------------------------------------------------------------------------
# SCFM
# ---------------------------------------------------------------------------


def scfm_modulator(x, block: SCFMBlock) -> Tensor:
    """Dual-branch (spatial + channel) sigmoid attention, without the residual."""
    x = as_tensor(x)
    return _scfm_parts(x, block)[2]


def _edge_pad(x, r: int) -> Tensor:
    """Replicate the border ``r`` pixels outward on both spatial axes."""
    H, W = x.shape[-2:]
    rows = np.clip(np.arange(-r, H + r), 0, H - 1)
    cols = np.clip(np.arange(-r, W + r), 0, W - 1)
    return x[:, :, rows][:, :, :, cols]


def _scfm_parts(x, block):
    B, C, H, W = x.shape
    with scope("spatial"):
        pooled = concat([x.max(axis=1, keepdims=True), x.mean(axis=1, keepdims=True)], axis=1)
        # Edge padding keeps the attention map flat on flat inputs; the ConvSpec
        # padding field still sets the "same"-size output and its cost.
        spec = block.spatial_conv
        padded = _edge_pad(pooled, spec.padding)
        w_s = sigmoid(conv2d_raw(padded, spec.weight, spec.bias, spec.stride, 0))
    with scope("channel"):
        f_d = conv2d(conv2d(x, block.reduce_conv).relu(), block.expand_conv)
        flat = f_d.reshape(B, C, H * W)
        w_c = sigmoid(flat.max(axis=2) + flat.mean(axis=2)).reshape(B, C, 1, 1)
    with scope("fuse"):
        out = conv2d(w_s * x, block.fuse_s) + conv2d(w_c * x, block.fuse_c)
    return w_s, w_c, out


def scfm_weights(x, block: SCFMBlock) -> tuple:
    """The spatial ``[B, 1, H, W]`` and channel ``[B, C, 1, 1]`` attention maps."""
    w_s, w_c, _ = _scfm_parts(as_tensor(x), block)
    return w_s, w_c


def scfm_forward(x, block: SCFMBlock) -> Tensor:
    x = as_tensor(x)
    return x + scfm_modulator(x, block)


# ---------------------------------------------------------------------------
# FFN and decoder block
# ---------------------------------------------------------------------------


def ffn_forward(x, block: FFNBlock) -> Tensor:
    x = as_tensor(x)
    with scope("norm"):
        y = layer_norm(x, block.norm)
    with scope("expand"):
        y = conv2d(y, block.expand)
    with scope("dwconv"):
        y = silu(conv2d(y, block.dwconv))
    with scope("contract"):
        y = conv2d(y, block.contract)
    return x + y


def decoder_block(x, ccsm: CCSMBlock, scfm: SCFMBlock, ffn: FFNBlock, seed: int) -> Tensor:
    x = as_tensor(x)
    with scope("ccsm"):
        mixed = ccsm_forward(x, ccsm, seed)
    with scope("scfm"):
        y = mixed + scfm_modulator(x, scfm)
    with scope("ffn"):
        return ffn_forward(y, ffn)


def run_decoder(x, block: DecoderBlock, seed: int) -> Tensor:
    return decoder_block(x, block.ccsm, block.scfm, block.ffn, seed)
