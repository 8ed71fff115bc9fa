"""Small image helpers shared across modules: one grayscale and one resize rule."""

from __future__ import annotations

import numpy as np
from PIL import Image

# ITU-R BT.601 luma weights; every module that needs intensity uses these.
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """H x W x 3 samples (any numeric dtype) -> float64 luma, same scale as input."""
    return np.asarray(pixels, dtype=np.float64) @ _LUMA


def resize_image(pixels: np.ndarray, dst_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W x 3 uint8 image."""
    h, w = dst_hw
    im = Image.fromarray(np.asarray(pixels, dtype=np.uint8))
    return np.asarray(im.resize((w, h), Image.BILINEAR))


def resize_image_float(pixels: np.ndarray, dst_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W x C float array, channel by channel."""
    h, w = dst_hw
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    out = np.stack(
        [
            np.asarray(Image.fromarray(arr[:, :, c], mode="F").resize((w, h), Image.BILINEAR))
            for c in range(arr.shape[2])
        ],
        axis=2,
    )
    return out[:, :, 0] if out.shape[2] == 1 else out


def resize_mask_nearest(bits: np.ndarray, dst_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a boolean grid; keeps masks binary.

    Destination cell (R, C) samples the source cell containing its center,
    so the mapping is deterministic and resolution round-trips keep shape.
    """
    src = np.asarray(bits, dtype=bool)
    sh, sw = src.shape
    dh, dw = dst_hw
    rows = np.minimum((((np.arange(dh) + 0.5) * sh) / dh).astype(np.int64), sh - 1)
    cols = np.minimum((((np.arange(dw) + 0.5) * sw) / dw).astype(np.int64), sw - 1)
    return src[np.ix_(rows, cols)]
