"""PNG encodings for instance masks: paletted (one index per instance),
binary, and RGB color-per-instance; plus a simple overlay renderer.

Palette convention: index 0 is background, instance id i is stored at index
i + 1, so ids must stay within [0, 254].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .core import BinaryMask, InstanceMaskSet
from .errors import InvalidArgumentError, NotFoundError

MASK_ENCODINGS = ("palette", "binary")


def instance_color(instance_id: int) -> tuple[int, int, int]:
    """Fixed distinct color per instance id, stable across runs."""
    i = instance_id + 1
    return ((37 * i + 97) % 256, (91 * i + 61) % 256, (151 * i + 127) % 256)


def _index_grid(masks: InstanceMaskSet) -> np.ndarray:
    dims = masks.dims
    if dims is None:
        raise InvalidArgumentError("cannot save an instance set with no masks")
    grid = np.zeros(dims, dtype=np.uint8)
    for iid in masks.instance_ids:
        if not 0 <= iid <= 254:
            raise InvalidArgumentError(
                f"instance id {iid} does not fit the palette range [0, 254]"
            )
        grid[masks.masks[iid].bits] = iid + 1
    return grid


def save_instance_masks_png(path: str | Path, masks: InstanceMaskSet) -> None:
    """Paletted PNG; overlapping instances resolve to the highest id."""
    grid = _index_grid(masks)
    img = Image.fromarray(grid, mode="P")
    palette = [0, 0, 0]
    for idx in range(1, 256):
        palette.extend(instance_color(idx - 1))
    img.putpalette(palette)
    img.save(Path(path), format="PNG")


def save_binary_mask_png(path: str | Path, mask: BinaryMask) -> None:
    Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8), mode="L").save(
        Path(path), format="PNG"
    )


def load_instance_masks_png(path: str | Path, frame_index: int = 0) -> InstanceMaskSet:
    """Decode a mask PNG into per-instance binary masks.

    Paletted images map index i to instance i - 1. Grayscale or 1-bit images
    become a single instance 0 from the nonzero pixels. RGB images treat each
    distinct non-black color as one instance, ids assigned in sorted color
    order.
    """
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"mask file {p} does not exist")
    img = Image.open(p)
    masks: dict[int, BinaryMask] = {}
    if img.mode == "P":
        grid = np.asarray(img)
        for idx in np.unique(grid):
            if idx == 0:
                continue
            masks[int(idx) - 1] = BinaryMask.from_bits(grid == idx)
    elif img.mode in ("L", "1"):
        arr = np.asarray(img.convert("L"))
        if arr.any():
            masks[0] = BinaryMask.from_bits(arr > 0)
    else:
        arr = np.asarray(img.convert("RGB"))
        flat = arr.reshape(-1, 3)
        colors = sorted(
            {tuple(c) for c in np.unique(flat, axis=0).tolist()} - {(0, 0, 0)}
        )
        for iid, color in enumerate(colors):
            masks[iid] = BinaryMask.from_bits((arr == color).all(axis=2))
    return InstanceMaskSet(frame_index=frame_index, masks=masks)


def load_mask_file(
    path: str | Path, encoding: str, frame_index: int = 0
) -> InstanceMaskSet:
    if encoding not in MASK_ENCODINGS:
        raise InvalidArgumentError(
            f"unknown mask encoding {encoding!r}, expected one of {MASK_ENCODINGS}"
        )
    loaded = load_instance_masks_png(path, frame_index)
    if encoding == "binary" and len(loaded.masks) > 1:
        merged = np.zeros(loaded.dims, dtype=bool)
        for m in loaded.masks.values():
            merged |= m.bits
        return InstanceMaskSet(
            frame_index=frame_index, masks={0: BinaryMask.from_bits(merged)}
        )
    return loaded


def overlay_masks(
    pixels: np.ndarray, masks: InstanceMaskSet, alpha: float = 0.5
) -> np.ndarray:
    """Blend each instance's color over the frame; returns uint8 H x W x 3."""
    out = np.asarray(pixels, dtype=np.float64).copy()
    for iid in masks.instance_ids:
        color = np.array(instance_color(iid), dtype=np.float64)
        bits = masks.masks[iid].bits
        out[bits] = (1.0 - alpha) * out[bits] + alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)
