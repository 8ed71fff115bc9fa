"""Point-promptable per-frame segmentation contract and first-frame mask
initialization, with a deterministic threshold-flood reference adapter.

Adapters work at their native resolution: segment() rescales the frame and
prompts in, thresholds the returned probability maps at 0.5, and
nearest-neighbor-resizes the masks back out, so callers always see masks at
frame resolution.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import (
    BinaryMask,
    BoxPrompt,
    Frame,
    InstanceMaskSet,
    Point,
    box_intersects_frame,
    point_cell,
    point_in_bounds,
    rescale_points,
)
from .errors import (
    CapabilityError,
    EmptyRegionError,
    InvalidArgumentError,
    SegmenterBackendError,
)
from .imaging import resize_image, resize_mask_nearest, to_grayscale

PROB_THRESHOLD = 0.5
# Connected components of a coarse text-prompt map must cover at least this
# fraction of the frame to become instances.
TEXT_COMPONENT_AREA_FLOOR = 0.005


@dataclass(frozen=True)
class PromptBundle:
    """Per-instance prompt: positive points, a box, free text, or a mix."""

    instance_id: int
    positive_points: tuple[Point, ...] = ()
    box: BoxPrompt | None = None
    text: str | None = None

    def __post_init__(self):
        if not self.positive_points and self.box is None and self.text is None:
            raise InvalidArgumentError(
                f"prompt for instance {self.instance_id} is empty"
            )
        object.__setattr__(self, "positive_points", tuple(self.positive_points))

    def modes(self) -> set[str]:
        out = set()
        if self.positive_points:
            out.add("points")
        if self.box is not None:
            out.add("box")
        if self.text is not None:
            out.add("text")
        return out


@dataclass(frozen=True)
class AdapterPrompt:
    """PromptBundle already mapped into the adapter's working resolution."""

    points: np.ndarray | None
    box: tuple[float, float, float, float] | None
    text: str | None


class SegmenterAdapter(ABC):
    """Backend producing one probability map per prompt.

    `predict` receives pixels at the adapter's working resolution (the
    original frame unless native_input_hw is set) along with prompts in the
    same coordinate space, and must return one H x W float map in [0, 1] per
    prompt, in order.
    """

    name: str = "segmenter"
    prompt_modes: frozenset[str] = frozenset({"points"})
    native_input_hw: tuple[int, int] | None = None

    @abstractmethod
    def predict(
        self, pixels: np.ndarray, prompts: Sequence[AdapterPrompt]
    ) -> list[np.ndarray]: ...

    def predict_text_map(self, pixels: np.ndarray, text: str) -> np.ndarray:
        """Coarse relevance map in [0, 1] for a frame-level text prompt."""
        raise CapabilityError(f"{self.name} does not support text prompts")

    def close(self) -> None:
        """Release backend resources; no-op by default."""


def _scale_xy(
    x: float, y: float, src_hw: tuple[int, int], dst_hw: tuple[int, int]
) -> tuple[float, float]:
    return x * dst_hw[1] / src_hw[1], y * dst_hw[0] / src_hw[0]


def _to_adapter_space(
    adapter: SegmenterAdapter, frame: Frame
) -> tuple[np.ndarray, tuple[int, int]]:
    native = adapter.native_input_hw
    if native is None or native == (frame.height, frame.width):
        return frame.pixels, (frame.height, frame.width)
    return resize_image(frame.pixels, native), native


def _adapter_prompt(
    bundle: PromptBundle, src_hw: tuple[int, int], dst_hw: tuple[int, int]
) -> AdapterPrompt:
    pts = None
    if bundle.positive_points:
        scaled = rescale_points(list(bundle.positive_points), src_hw, dst_hw)
        pts = np.array([(p.x, p.y) for p in scaled], dtype=np.float64)
    box = None
    if bundle.box is not None:
        x0, y0 = _scale_xy(bundle.box.x_min, bundle.box.y_min, src_hw, dst_hw)
        x1, y1 = _scale_xy(bundle.box.x_max, bundle.box.y_max, src_hw, dst_hw)
        box = (x0, y0, x1, y1)
    return AdapterPrompt(points=pts, box=box, text=bundle.text)


def _validate_bundles(
    adapter: SegmenterAdapter, frame: Frame, prompts: Sequence[PromptBundle]
) -> None:
    if not prompts:
        raise InvalidArgumentError("at least one prompt bundle is required")
    seen: set[int] = set()
    for b in prompts:
        if b.instance_id in seen:
            raise InvalidArgumentError(f"duplicate instance id {b.instance_id}")
        seen.add(b.instance_id)
        missing = b.modes() - adapter.prompt_modes
        if missing:
            raise CapabilityError(
                f"{adapter.name} does not support prompt modes {sorted(missing)}"
            )
        for p in b.positive_points:
            if not point_in_bounds(p, frame.height, frame.width):
                raise InvalidArgumentError(
                    f"prompt point ({p.x}, {p.y}) outside frame bounds "
                    f"{frame.height}x{frame.width}"
                )
        if b.box is not None and not box_intersects_frame(
            b.box, frame.height, frame.width
        ):
            raise InvalidArgumentError(
                f"box prompt for instance {b.instance_id} lies outside the frame"
            )


def segment(
    adapter: SegmenterAdapter, frame: Frame, prompts: Sequence[PromptBundle]
) -> InstanceMaskSet:
    """One binary mask per prompt bundle, at frame resolution."""
    _validate_bundles(adapter, frame, prompts)
    pixels, work_hw = _to_adapter_space(adapter, frame)
    src_hw = (frame.height, frame.width)
    adapter_prompts = [_adapter_prompt(b, src_hw, work_hw) for b in prompts]
    try:
        prob_maps = adapter.predict(pixels, adapter_prompts)
    except (CapabilityError, InvalidArgumentError):
        raise
    except Exception as exc:
        raise SegmenterBackendError(adapter.name, str(exc), frame_index=frame.index) from exc
    if len(prob_maps) != len(prompts):
        raise SegmenterBackendError(
            adapter.name,
            f"expected {len(prompts)} masks, got {len(prob_maps)}",
            frame_index=frame.index,
        )
    masks = {}
    for bundle, prob in zip(prompts, prob_maps):
        prob = np.asarray(prob, dtype=np.float64)
        if prob.shape != work_hw:
            raise SegmenterBackendError(
                adapter.name,
                f"mask shape {prob.shape} does not match working resolution {work_hw}",
                frame_index=frame.index,
            )
        bits = prob >= PROB_THRESHOLD
        if work_hw != src_hw:
            bits = resize_mask_nearest(bits, src_hw)
        masks[bundle.instance_id] = BinaryMask.from_bits(bits)
    return InstanceMaskSet(frame_index=frame.index, masks=masks)


def init_mask_from_text(
    adapter: SegmenterAdapter,
    frame: Frame,
    text: str,
    threshold: float = PROB_THRESHOLD,
) -> InstanceMaskSet:
    """Frame-level text prompt -> instances, one per large-enough component.

    The adapter's coarse relevance map is thresholded and split into
    4-connected components; components covering at least 0.5% of the frame
    become instances (ids follow raster discovery order). Coarseness is
    acceptable — the map only has to roughly cover the region.
    """
    if "text" not in adapter.prompt_modes:
        raise CapabilityError(f"{adapter.name} does not support text prompts")
    if not text:
        raise InvalidArgumentError("text prompt must be non-empty")
    pixels, work_hw = _to_adapter_space(adapter, frame)
    try:
        coarse = adapter.predict_text_map(pixels, text)
    except CapabilityError:
        raise
    except Exception as exc:
        raise SegmenterBackendError(adapter.name, str(exc), frame_index=frame.index) from exc
    coarse = np.asarray(coarse, dtype=np.float64)
    if coarse.shape != work_hw:
        raise SegmenterBackendError(
            adapter.name,
            f"coarse map shape {coarse.shape} does not match {work_hw}",
            frame_index=frame.index,
        )
    bits = coarse >= threshold
    if work_hw != (frame.height, frame.width):
        bits = resize_mask_nearest(bits, (frame.height, frame.width))
    labels, count = ndimage.label(bits)
    floor = TEXT_COMPONENT_AREA_FLOOR * frame.height * frame.width
    masks = {}
    next_id = 0
    for label in range(1, count + 1):
        component = labels == label
        if component.sum() >= floor:
            masks[next_id] = BinaryMask.from_bits(component)
            next_id += 1
    if not masks:
        raise EmptyRegionError(
            f"no component covers at least {TEXT_COMPONENT_AREA_FLOOR:.1%} of the frame"
        )
    return InstanceMaskSet(frame_index=frame.index, masks=masks)


def init_mask_from_box(
    adapter: SegmenterAdapter, frame: Frame, boxes: Sequence[BoxPrompt]
) -> InstanceMaskSet:
    """One instance per box, ids in input order starting at 0."""
    if "box" not in adapter.prompt_modes:
        raise CapabilityError(f"{adapter.name} does not support box prompts")
    if not boxes:
        raise InvalidArgumentError("at least one box is required")
    prompts = [PromptBundle(instance_id=i, box=b) for i, b in enumerate(boxes)]
    return segment(adapter, frame, prompts)


class ThresholdFloodSegmenter(SegmenterAdapter):
    """Brightness-threshold connected components as a deterministic oracle.

    Point prompts return the union of bright components containing the
    points; a box prompt returns the largest bright component within the box.
    The text map is just scaled luma, standing in for a coarse relevance
    model. Intended for synthetic scenes where brightness == objectness.
    """

    name = "threshold_flood"
    prompt_modes = frozenset({"points", "box", "text"})

    def __init__(
        self,
        intensity_threshold: float = 128.0,
        native_input_hw: tuple[int, int] | None = None,
    ):
        self.intensity_threshold = float(intensity_threshold)
        self.native_input_hw = native_input_hw

    def _bright(self, pixels: np.ndarray) -> np.ndarray:
        return to_grayscale(pixels) >= self.intensity_threshold

    def predict(
        self, pixels: np.ndarray, prompts: Sequence[AdapterPrompt]
    ) -> list[np.ndarray]:
        bright = self._bright(pixels)
        labels, _ = ndimage.label(bright)
        h, w = bright.shape
        out = []
        for prompt in prompts:
            if prompt.points is not None and len(prompt.points):
                hit = set()
                for x, y in prompt.points:
                    r, c = point_cell(Point(float(x), float(y)))
                    if 0 <= r < h and 0 <= c < w:
                        hit.add(int(labels[r, c]))
                hit.discard(0)
                mask = np.isin(labels, sorted(hit)) if hit else np.zeros_like(bright)
            elif prompt.box is not None:
                mask = self._box_mask(bright, prompt.box)
            else:
                raise InvalidArgumentError(
                    "threshold flood needs point or box prompts per instance"
                )
            out.append(mask.astype(np.float64))
        return out

    @staticmethod
    def _box_mask(
        bright: np.ndarray, box: tuple[float, float, float, float]
    ) -> np.ndarray:
        h, w = bright.shape
        x0, y0, x1, y1 = box
        cols = np.arange(w) + 0.5
        rows = np.arange(h) + 0.5
        inside = ((rows >= y0) & (rows < y1))[:, None] & ((cols >= x0) & (cols < x1))[None, :]
        labels, count = ndimage.label(bright & inside)
        if count == 0:
            return np.zeros_like(bright)
        sizes = ndimage.sum_labels(np.ones_like(labels), labels, range(1, count + 1))
        return labels == (int(np.argmax(sizes)) + 1)

    def predict_text_map(self, pixels: np.ndarray, text: str) -> np.ndarray:
        return to_grayscale(pixels) / 255.0
