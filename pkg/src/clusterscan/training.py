"""Desk-scale training on degraded/clean image pairs."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import get_dtype
from .imageio import ImageDataError, read_image
from .metrics import format_psnr, psnr
from .network import Model, OptimizerState, cosine_lr, train_step

PAIR_SUFFIXES = ("_in", "_gt")
IMAGE_EXTS = (".png", ".ppm")


class PairingError(ImageDataError):
    """The data directory is empty or holds files without a partner."""


def find_pairs(data_dir) -> list:
    """``[(stem, degraded_path, clean_path)]`` for ``<stem>_in.*`` / ``<stem>_gt.*`` files, sorted by stem."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise PairingError(f"{data_dir}: not a directory")
    found: dict[str, dict[str, Path]] = {}
    offenders = []
    for path in sorted(data_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_EXTS:
            continue
        for suffix in PAIR_SUFFIXES:
            if path.stem.endswith(suffix):
                found.setdefault(path.stem[: -len(suffix)], {})[suffix] = path
                break
        else:
            offenders.append(path.name)
    for stem, sides in sorted(found.items()):
        if len(sides) != 2:
            offenders.extend(p.name for p in sides.values())
    if offenders:
        raise PairingError(f"unpaired files in {data_dir}: {', '.join(sorted(offenders))}")
    if not found:
        raise PairingError(f"{data_dir}: no image pairs (expected <stem>_in / <stem>_gt)")
    return [(stem, s["_in"], s["_gt"]) for stem, s in sorted(found.items())]


def load_pairs(data_dir) -> list:
    """Decoded ``(degraded, clean)`` arrays, each ``[3, H, W]``."""
    pairs = []
    for stem, a, b in find_pairs(data_dir):
        x, y = read_image(a), read_image(b)
        if x.shape != y.shape:
            raise PairingError(f"{stem}: degraded {x.shape} and clean {y.shape} differ in size")
        pairs.append((x.transpose(2, 0, 1), y.transpose(2, 0, 1)))
    return pairs


def synthetic_pair(size: int = 64) -> tuple:
    """A smooth three-channel test pattern and a darkened, gamma-shifted copy.

    Returns ``(degraded, clean)``, each ``[3, size, size]`` in ``[0, 1]``.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    clean = np.stack([
        0.5 + 0.3 * np.sin(2 * np.pi * (xx + yy)),
        0.4 + 0.4 * xx * yy,
        0.3 + 0.25 * np.cos(3 * np.pi * xx) * np.sin(2 * np.pi * yy),
    ])
    return 0.35 * clean**1.2, clean


def random_crop_flip(rng: np.random.Generator, degraded, clean, crop: int, flips: bool = True) -> tuple:
    """The same random ``crop x crop`` window and random flips applied to both images.

    With ``flips=False`` the flip bits are still drawn (the generator stream is
    unchanged) but not applied.
    """
    _, h, w = degraded.shape
    if crop > h or crop > w:
        raise PairingError(f"crop {crop} larger than image {h}x{w}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip_v, flip_h = rng.integers(0, 2, size=2) * flips
    out = []
    for img in (degraded, clean):
        img = img[:, top : top + crop, left : left + crop]
        if flip_v:
            img = img[:, ::-1, :]
        if flip_h:
            img = img[:, :, ::-1]
        out.append(np.ascontiguousarray(img))
    return tuple(out)


@dataclass
class TrainLog:
    lines: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    psnrs: list = field(default_factory=list)

    def record(self, step: int, lr: float, loss: float, quality: float) -> str:
        line = f"{step} {lr:.9e} {loss:.9e} {format_psnr(quality)}"
        self.lines.append(line)
        self.losses.append(loss)
        self.psnrs.append(quality)
        return line

    def text(self) -> str:
        return "".join(line + "\n" for line in self.lines)


def block_averages(values, window: int = 100) -> np.ndarray:
    """Means of consecutive non-overlapping ``window``-step blocks (a trailing partial block is dropped)."""
    values = np.asarray(values, dtype=np.float64)
    k = len(values) // window
    return values[: k * window].reshape(k, window).mean(axis=1)


def train_pairs(
    model: Model,
    pairs: list,
    steps: int,
    crop: int | None = None,
    seed: int = 0,
    lr0: float = 5e-4,
    lr_min: float = 1e-6,
    on_step=None,
    flips: bool = True,
) -> tuple:
    """Run ``steps`` AdamW updates on random crops of ``pairs``; returns ``(log, state)``.

    Each step draws a pair, a crop window and flips from a generator seeded
    with ``seed``. Under the ``fresh`` seed policy centroid seeds come from the
    same generator; under ``fixed`` the shape-derived evaluation seed is used.
    ``flips=False`` disables the flip augmentation, as for single-pair overfitting.
    """
    if not pairs:
        raise PairingError("no training pairs")
    crop = model.config.crop_size if crop is None else crop
    rng = np.random.default_rng(seed)
    state = OptimizerState()
    log = TrainLog()
    dtype = get_dtype()
    for t in range(steps):
        x, y = pairs[int(rng.integers(0, len(pairs)))]
        x, y = random_crop_flip(rng, x, y, crop, flips)
        block_seed = int(rng.integers(0, 2**32)) if model.config.seed_policy == "fresh" else None
        lr = cosine_lr(t, steps, lr0, lr_min)
        value, state, pred = train_step(
            model, (x[None].astype(dtype), y[None].astype(dtype)), state, lr, seed=block_seed, return_pred=True
        )
        line = log.record(t + 1, lr, value, psnr(np.clip(pred[0], 0, 1), y))
        if on_step is not None:
            on_step(line)
    return log, state
