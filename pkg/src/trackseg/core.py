"""Domain types, coordinate conventions, and mask encodings.

Coordinate convention used everywhere in this package: a point is (x, y)
with x = column and y = row, continuous, origin at the top-left corner of
pixel (0, 0). A continuous point (x, y) belongs to mask cell
(floor(y), floor(x)). Adapters convert to this convention at the boundary.
"""

from __future__ import annotations

import base64
import math
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, RLEDecodeError

__all__ = [
    "Frame",
    "Point",
    "QueryPointSet",
    "TrackedPointSet",
    "BinaryMask",
    "InstanceMaskSet",
    "BoxPrompt",
    "rescale_points",
    "mask_to_rle",
    "rle_to_mask",
    "mask_payload",
    "mask_from_payload",
    "frame_payload",
    "frame_from_payload",
    "point_in_bounds",
    "point_cell",
    "point_in_mask",
    "box_intersects_frame",
]


@dataclass(frozen=True, eq=False)
class Frame:
    """One timestamped video frame holding an H x W x 3 grid of 8-bit samples."""

    index: int
    timestamp_ms: float
    height: int
    width: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.index < 0:
            raise InvalidArgumentError(f"frame index must be >= 0, got {self.index}")
        if self.timestamp_ms < 0:
            raise InvalidArgumentError(f"timestamp_ms must be >= 0, got {self.timestamp_ms}")
        if self.height < 1 or self.width < 1:
            raise InvalidArgumentError(f"frame dimensions must be positive, got {self.height}x{self.width}")
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise InvalidArgumentError(f"pixels must be uint8, got {px.dtype}")
        if px.shape != (self.height, self.width, 3):
            raise InvalidArgumentError(
                f"pixel array shape {px.shape} does not match {self.height}x{self.width}x3"
            )
        px = px.copy() if px.flags.writeable else px
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_pixels(cls, index: int, pixels: np.ndarray, timestamp_ms: float | None = None) -> "Frame":
        px = np.ascontiguousarray(pixels, dtype=np.uint8)
        h, w = px.shape[:2]
        ts = float(index) if timestamp_ms is None else timestamp_ms
        return cls(index=index, timestamp_ms=ts, height=h, width=w, pixels=px)


@dataclass(frozen=True)
class Point:
    """Continuous pixel location; x is the column, y the row."""

    x: float
    y: float

    def __post_init__(self):
        x, y = float(self.x), float(self.y)
        if not (math.isfinite(x) and math.isfinite(y)):
            raise InvalidArgumentError(f"point coordinates must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


@dataclass(frozen=True)
class QueryPointSet:
    """Query points issued for one instance at its birth frame.

    Point order is identity: point i keeps index i for the whole run.
    Creation sites are responsible for checking the points against the
    birth frame's bounds.
    """

    instance_id: int
    points: tuple[Point, ...]
    birth_frame: int

    def __post_init__(self):
        if self.instance_id < 0:
            raise InvalidArgumentError(f"instance_id must be >= 0, got {self.instance_id}")
        if self.birth_frame < 0:
            raise InvalidArgumentError(f"birth_frame must be >= 0, got {self.birth_frame}")
        pts = tuple(self.points)
        if not pts:
            raise InvalidArgumentError("query point set must be non-empty")
        object.__setattr__(self, "points", pts)


@dataclass(frozen=True)
class TrackedPointSet:
    """Per-frame tracked positions for one instance, index-aligned with its query set.

    Positions may lie outside frame bounds only when the matching visible
    flag is false.
    """

    instance_id: int
    frame_index: int
    points: tuple[Point, ...]
    visible: tuple[bool, ...]

    def __post_init__(self):
        pts = tuple(self.points)
        vis = tuple(bool(v) for v in self.visible)
        if not pts:
            raise InvalidArgumentError("tracked point set must be non-empty")
        if len(pts) != len(vis):
            raise InvalidArgumentError(
                f"points ({len(pts)}) and visible ({len(vis)}) must have equal length"
            )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visible", vis)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """H x W boolean grid annotating one frame."""

    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgumentError(f"mask dimensions must be positive, got {self.height}x{self.width}")
        b = np.asarray(self.bits)
        if b.dtype != np.bool_:
            b = b.astype(bool)
        if b.shape != (self.height, self.width):
            raise InvalidArgumentError(f"bits shape {b.shape} does not match {self.height}x{self.width}")
        b = b.copy() if b.flags.writeable else b
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "BinaryMask":
        b = np.asarray(bits, dtype=bool)
        return cls(height=b.shape[0], width=b.shape[1], bits=b)

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(height=height, width=width, bits=np.zeros((height, width), dtype=bool))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return not self.bits.any()

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.bits, other.bits)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class InstanceMaskSet:
    """Per-frame masks keyed by instance id; all members share one shape."""

    frame_index: int
    masks: Mapping[int, BinaryMask]

    def __post_init__(self):
        items = dict(self.masks)
        for iid in items:
            if not isinstance(iid, int) or iid < 0:
                raise InvalidArgumentError(f"instance ids must be non-negative ints, got {iid!r}")
        dims = {(m.height, m.width) for m in items.values()}
        if len(dims) > 1:
            raise InvalidArgumentError(f"member masks disagree on dimensions: {sorted(dims)}")
        object.__setattr__(self, "masks", MappingProxyType(items))

    @property
    def instance_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.masks))

    @property
    def dims(self) -> tuple[int, int] | None:
        for m in self.masks.values():
            return (m.height, m.width)
        return None

    def __eq__(self, other) -> bool:
        if not isinstance(other, InstanceMaskSet):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and set(self.masks) == set(other.masks)
            and all(self.masks[k] == other.masks[k] for k in self.masks)
        )

    __hash__ = None


@dataclass(frozen=True)
class BoxPrompt:
    """Axis-aligned box in pixel coordinates; must intersect the frame it prompts."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(float(v)) for v in vals):
            raise InvalidArgumentError(f"box coordinates must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError(
                f"degenerate box: need x_min < x_max and y_min < y_max, got {vals}"
            )


def rescale_points(
    points: Sequence[Point], src_hw: tuple[int, int], dst_hw: tuple[int, int]
) -> list[Point]:
    """Map points between resolutions: each coordinate scales by dst/src per axis."""
    sh, sw = src_hw
    dh, dw = dst_hw
    if sh <= 0 or sw <= 0 or dh <= 0 or dw <= 0:
        raise InvalidArgumentError(f"dimensions must be positive, got src={src_hw} dst={dst_hw}")
    fx = dw / sw
    fy = dh / sh
    return [Point(p.x * fx, p.y * fy) for p in points]


def mask_to_rle(mask: BinaryMask) -> list[int]:
    """Encode a mask as COCO-style run lengths over the row-major flattening.

    Counts alternate starting with the zero run, so the first count is 0
    when the mask begins with a set pixel. sum(counts) == H*W.
    """
    flat = mask.bits.reshape(-1).astype(np.int8)
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return [int(c) for c in counts]


def rle_to_mask(counts: Sequence[int], height: int, width: int) -> BinaryMask:
    """Exact inverse of mask_to_rle."""
    if height < 1 or width < 1:
        raise RLEDecodeError(f"dimensions must be positive, got {height}x{width}")
    cs = [int(c) for c in counts]
    if any(c < 0 for c in cs):
        raise RLEDecodeError(f"counts must be non-negative, got {cs}")
    total = sum(cs)
    if total != height * width:
        raise RLEDecodeError(f"count sum {total} does not equal {height}*{width}={height * width}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    value = False
    for c in cs:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return BinaryMask(height=height, width=width, bits=flat.reshape(height, width))


def mask_payload(mask: BinaryMask) -> dict:
    """Wire form of a mask: {"height", "width", "counts"} with JSON-safe values."""
    return {"height": mask.height, "width": mask.width, "counts": mask_to_rle(mask)}


def mask_from_payload(payload: Mapping) -> BinaryMask:
    try:
        h, w, counts = payload["height"], payload["width"], payload["counts"]
    except KeyError as e:
        raise RLEDecodeError(f"mask payload missing field {e}") from e
    return rle_to_mask(counts, int(h), int(w))


def frame_payload(frame: Frame) -> dict:
    """Wire form of a frame: base64 of the raw RGB bytes plus dimensions."""
    rgb = np.ascontiguousarray(frame.pixels, dtype=np.uint8)
    return {
        "rgb_b64": base64.b64encode(rgb.tobytes()).decode("ascii"),
        "height": frame.height,
        "width": frame.width,
        "index": frame.index,
    }


def frame_from_payload(payload: Mapping) -> Frame:
    try:
        height, width = int(payload["height"]), int(payload["width"])
        raw = base64.b64decode(payload["rgb_b64"])
        index = int(payload["index"])
    except (KeyError, TypeError, ValueError) as e:
        raise InvalidArgumentError(f"bad frame payload: {e}") from e
    expected = height * width * 3
    if len(raw) != expected:
        raise InvalidArgumentError(
            f"frame payload carries {len(raw)} bytes, expected {expected}"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return Frame(
        index=index,
        timestamp_ms=float(payload.get("timestamp_ms", 0.0)),
        height=height,
        width=width,
        pixels=pixels.copy(),
    )


def point_in_bounds(p: Point, height: int, width: int) -> bool:
    """True when the point lies inside the frame: 0 <= x < width, 0 <= y < height."""
    return 0.0 <= p.x < width and 0.0 <= p.y < height


def point_cell(p: Point) -> tuple[int, int]:
    """Mask cell (row, col) a continuous point belongs to."""
    return (math.floor(p.y), math.floor(p.x))


def point_in_mask(p: Point, mask: BinaryMask) -> bool:
    r, c = point_cell(p)
    if not (0 <= r < mask.height and 0 <= c < mask.width):
        return False
    return bool(mask.bits[r, c])


def box_intersects_frame(box: BoxPrompt, height: int, width: int) -> bool:
    return box.x_min < width and box.x_max > 0 and box.y_min < height and box.y_max > 0
