"""8-bit RGB image files.

PNG is the lossless container (via Pillow); plain-text PPM (``P3``) is a
hand-editable fallback for fixtures. In memory an image is a float array
``[H, W, 3]`` in ``[0, 1]``; samples are ``round(255 * x)`` on disk.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class ImageDataError(ValueError):
    """The file could not be decoded as an 8-bit RGB image."""


def to_uint8(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageDataError(f"expected [H, W, 3], got {img.shape}")
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def _tokens(text: str):
    for line in text.splitlines():
        yield from line.split("#", 1)[0].split()


def decode_ppm_ascii(text: str) -> np.ndarray:
    tok = _tokens(text)
    try:
        if next(tok) != "P3":
            raise ImageDataError("not a plain PPM (P3) file")
        w, h, maxval = int(next(tok)), int(next(tok)), int(next(tok))
        values = [int(v) for v in tok]
    except (StopIteration, ValueError) as exc:
        raise ImageDataError(f"malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise ImageDataError(f"only maxval 255 is supported, got {maxval}")
    if len(values) != w * h * 3:
        raise ImageDataError(f"PPM holds {len(values)} samples, expected {w * h * 3}")
    arr = np.array(values, dtype=np.int64).reshape(h, w, 3)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ImageDataError("PPM sample out of range")
    return arr.astype(np.uint8)


def encode_ppm_ascii(arr: np.ndarray) -> str:
    h, w, _ = arr.shape
    lines = ["P3", f"{w} {h}", "255"]
    lines += [" ".join(str(int(v)) for v in row.reshape(-1)) for row in arr]
    return "\n".join(lines) + "\n"


def read_image(path) -> np.ndarray:
    """Decode ``path`` to ``[H, W, 3]`` floats in ``[0, 1]``."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".ppm":
            return from_uint8(decode_ppm_ascii(path.read_text(encoding="ascii")))
        with Image.open(path) as im:
            if im.mode != "RGB":
                raise ImageDataError(f"{path}: mode {im.mode}, expected 8-bit RGB")
            return from_uint8(np.array(im))
    except (OSError, UnicodeDecodeError) as exc:
        raise ImageDataError(f"{path}: {exc}") from exc


def write_image(path, img) -> None:
    path = Path(path)
    arr = to_uint8(img)
    if path.suffix.lower() == ".ppm":
        path.write_text(encode_ppm_ascii(arr), encoding="ascii")
    elif path.suffix.lower() == ".png":
        Image.fromarray(arr).save(path, format="PNG")
    else:
        raise ImageDataError(f"{path}: unsupported extension (use .png or .ppm)")


def to_batch(img) -> np.ndarray:
    """``[H, W, 3] -> [1, 3, H, W]``."""
    return np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)[None])


def from_batch(x) -> np.ndarray:
    """``[1, 3, H, W] -> [H, W, 3]``."""
    return np.ascontiguousarray(np.asarray(x)[0].transpose(1, 2, 0))
