"""The asymmetric restoration U-Net, its loss and optimizer.

Layout (``L = levels``, widths ``embed_dim * 2**i``)::

    stem 3x3 -> [encoder level i: FFN blocks, then stride-2 down]  i = 0..L-1
             -> bottleneck decoder blocks at the deepest width
             -> [decoder level i: (up), concat skip, 1x1 fuse, decoder blocks]  i = L-1..0
             -> refinement decoder blocks -> head 3x3 -> image + residual
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import numpy as np

from .autodiff import ContractError, ShapeError, Tape, Tensor, as_tensor, concat, get_dtype
from .blocks import DecoderBlock, FFNBlock, ffn_forward, run_decoder
from .instrument import scope
from .nn import ConvSpec, conv2d, downsample, downsample_spec, fft2d_mag_parts, upsample, upsample_spec

SEED_POLICIES = ("fresh", "fixed")


@dataclass
class NetworkConfig:
    levels: int = 3
    blocks_per_level: tuple = (2, 4, 4)
    bottleneck_blocks: int = 4
    refine_blocks: int = 4
    embed_dim: int = 32
    centroids: int = 4
    state_dim: int = 16
    ffn_expansion: int = 2
    scfm_reduction: int = 4
    knn_k: int = 3
    fft_loss_weight: float = 0.1
    crop_size: int = 64
    seed_policy: str = "fresh"

    def __post_init__(self):
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ContractError("need at least one level")
        if len(self.blocks_per_level) != self.levels:
            raise ContractError(
                f"blocks_per_level has {len(self.blocks_per_level)} entries for {self.levels} levels"
            )
        counts = (*self.blocks_per_level, self.bottleneck_blocks, self.refine_blocks)
        if any(b < 0 for b in counts):
            raise ContractError("block counts must be non-negative")
        for name in ("embed_dim", "centroids", "state_dim", "ffn_expansion", "scfm_reduction"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.embed_dim % self.scfm_reduction:
            raise ContractError("embed_dim must be divisible by the SCFM reduction ratio")
        if self.knn_k < 1 or self.knn_k % 2 == 0:
            raise ContractError("knn_k must be a positive odd window size")
        if self.fft_loss_weight < 0:
            raise ContractError("fft_loss_weight must be non-negative")
        if self.seed_policy not in SEED_POLICIES:
            raise ContractError(f"seed_policy must be one of {SEED_POLICIES}")

    @property
    def multiple(self) -> int:
        """Spatial extents must be divisible by this."""
        return 2 ** self.levels

    def widths(self) -> list:
        return [self.embed_dim * 2**i for i in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_level"] = list(self.blocks_per_level)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def full_config(**overrides) -> NetworkConfig:
    return NetworkConfig(**overrides)


def smoke_config(**overrides) -> NetworkConfig:
    base = dict(blocks_per_level=(1, 1, 1), bottleneck_blocks=1, refine_blocks=1, embed_dim=4)
    base.update(overrides)
    return NetworkConfig(**base)


@dataclass
class Model:
    config: NetworkConfig
    stem: ConvSpec
    encoder: list
    downs: list
    bottleneck: list
    ups: list
    fuses: list
    decoder: list
    refine: list
    head: ConvSpec


def build(config: NetworkConfig, seed: int = 0, zero_head: bool = False) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    widths = config.widths()
    deep = widths[-1]

    def dec(c):
        return DecoderBlock.init(
            c, config.centroids, config.state_dim, config.ffn_expansion,
            config.scfm_reduction, config.knn_k, rng=rng,
        )

    stem = ConvSpec.init(3, config.embed_dim, 3, rng=rng)
    encoder = [[FFNBlock.init(c, config.ffn_expansion, rng=rng) for _ in range(nb)]
               for c, nb in zip(widths, config.blocks_per_level)]
    downs = [downsample_spec(c, rng) for c in widths[:-1]]
    bottleneck = [dec(deep) for _ in range(config.bottleneck_blocks)]
    ups = [upsample_spec(c, rng) for c in widths[1:]]
    fuses = [ConvSpec.init(2 * c, c, 1, rng=rng) for c in widths]
    decoder = [[dec(c) for _ in range(nb)] for c, nb in zip(widths, config.blocks_per_level)]
    refine = [dec(config.embed_dim) for _ in range(config.refine_blocks)]
    head = ConvSpec.init(config.embed_dim, 3, 3, rng=rng)
    if zero_head:
        head.weight.data = np.zeros_like(head.weight.data)
        head.bias.data = np.zeros_like(head.bias.data)
    return Model(config, stem, encoder, downs, bottleneck, ups, fuses, decoder, refine, head)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def named_parameters(obj, prefix: str = ""):
    """Yield ``(dotted_name, Tensor)`` for every tensor reachable from ``obj``, in a fixed order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif is_dataclass(obj) and not isinstance(obj, NetworkConfig):
        for f in fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)


def parameters(obj) -> list:
    return [t for _, t in named_parameters(obj)]


def param_count(obj) -> int:
    return sum(t.size for t in parameters(obj))


# ---------------------------------------------------------------------------
# Forward and loss
# ---------------------------------------------------------------------------


def eval_seed(shape) -> int:
    """Shape-derived centroid seed used whenever no explicit seed is given."""
    return zlib.crc32(repr(tuple(int(s) for s in shape[1:])).encode())


def _block_seed(base: int, index: int) -> int:
    return (base + 7919 * index) % 2**32


def check_extents(config: NetworkConfig, shape) -> None:
    if len(shape) != 4 or shape[1] != 3:
        raise ShapeError(f"expected an image batch [B, 3, H, W], got {tuple(shape)}")
    m = config.multiple
    if shape[2] % m or shape[3] % m:
        raise ShapeError(f"spatial extents {shape[2]}x{shape[3]} must be divisible by {m}")


def forward(model: Model, image, seed: int | None = None) -> Tensor:
    """Restore ``image`` (``[B, 3, H, W]``); ``seed=None`` selects the fixed eval seeds."""
    image = as_tensor(image)
    cfg = model.config
    check_extents(cfg, image.shape)
    base = eval_seed(image.shape) if seed is None else int(seed)
    counter = iter(range(1 << 30))

    def next_seed():
        return _block_seed(base, next(counter))

    with scope("stem"):
        x = conv2d(image, model.stem)
    skips = []
    for i, blocks in enumerate(model.encoder):
        for j, blk in enumerate(blocks):
            with scope(f"encoder.level{i + 1}.block{j + 1}"):
                x = ffn_forward(x, blk)
        skips.append(x)
        if i < cfg.levels - 1:
            with scope(f"encoder.level{i + 1}.down"):
                x = downsample(x, model.downs[i])
    for j, blk in enumerate(model.bottleneck):
        with scope(f"bottleneck.block{j + 1}"):
            x = run_decoder(x, blk, next_seed())
    for i in reversed(range(cfg.levels)):
        if i < cfg.levels - 1:
            with scope(f"decoder.level{i + 1}.up"):
                x = upsample(x, model.ups[i])
        with scope(f"decoder.level{i + 1}.fuse"):
            x = conv2d(concat([x, skips[i]], axis=1), model.fuses[i])
        for j, blk in enumerate(model.decoder[i]):
            with scope(f"decoder.level{i + 1}.block{j + 1}"):
                x = run_decoder(x, blk, next_seed())
    for j, blk in enumerate(model.refine):
        with scope(f"refine.block{j + 1}"):
            x = run_decoder(x, blk, next_seed())
    with scope("head"):
        residual = conv2d(x, model.head)
    return image + residual


def loss(pred, target, fft_weight: float = 0.1) -> Tensor:
    """Mean absolute error plus ``fft_weight`` times the mean absolute DFT error.

    The spectral term averages ``|Re|`` and ``|Im|`` of the unnormalized 2-D DFT
    of ``pred - target`` over all ``2 * numel`` entries.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    total = diff.abs().mean()
    if fft_weight:
        re, im = fft2d_mag_parts(diff)
        spectral = (re.abs().sum() + im.abs().sum()) * (0.5 / diff.size)
        total = total + spectral * fft_weight
    return total


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    pass


def cosine_lr(step: int, total_steps: int, lr0: float = 5e-4, lr_min: float = 1e-6) -> float:
    if total_steps <= 0:
        return lr0
    t = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * t / total_steps))


@dataclass
class OptimizerState:
    """AdamW moments for a fixed, ordered parameter list."""

    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4


def adamw_update(params: list, state: OptimizerState, lr: float) -> OptimizerState:
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)
        p.grad = None
    return state


def train_step(
    model: Model,
    batch,
    state: OptimizerState | None,
    lr: float,
    seed: int | None = None,
    return_pred: bool = False,
):
    """One forward/backward/AdamW update on ``batch = (degraded, clean)``.

    Returns ``(loss_value, state)``, plus the pre-update prediction array when
    ``return_pred`` is set. Raises :class:`TrainingDiverged` on a non-finite
    loss before touching the parameters.
    """
    degraded, clean = batch
    degraded = as_tensor(np.asarray(degraded, dtype=get_dtype()))
    clean = as_tensor(np.asarray(clean, dtype=get_dtype()))
    state = OptimizerState() if state is None else state
    params = parameters(model)
    for p in params:
        p.grad = None
    with Tape() as tape:
        pred = forward(model, degraded, seed=seed)
        value = loss(pred, clean, model.config.fft_loss_weight)
    lv = value.item()
    if not math.isfinite(lv):
        bad = [n for n, p in named_parameters(model) if not np.all(np.isfinite(p.data))]
        raise TrainingDiverged(
            f"non-finite loss {lv} at optimizer step {state.step}; "
            f"non-finite parameters: {bad[:5] or 'none'}"
        )
    tape.backward(value)
    adamw_update(params, state, lr)
    if return_pred:
        return lv, state, pred.data
    return lv, state
