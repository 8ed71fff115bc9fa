"""Online point-tracking adapter contract plus deterministic reference
trackers.

A TrackerSession owns the streaming state: a sliding window of recent frames,
the query registry, and a flat point array maintained by the adapter. Frames
must be fed strictly in order, one session per caller. Adapters may run
in-process (the reference trackers here) or out of process behind the NDJSON
socket protocol (see remote module).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Frame, Point, QueryPointSet, TrackedPointSet, point_in_bounds
from .errors import (
    CapabilityError,
    InvalidArgumentError,
    OrderingError,
    TrackerBackendError,
)
from .imaging import to_grayscale
from .synth import SceneMotion

DEFAULT_WINDOW_SIZE = 4


@dataclass(frozen=True)
class TrackerCapabilities:
    supports_visibility: bool = True
    supports_midstream_queries: bool = True


class TrackerAdapter(ABC):
    """Backend that advances a set of tracked points frame by frame.

    One adapter instance backs one live session at a time; `start` resets any
    prior state. Point arrays are (N, 2) float64 in (x, y) frame coordinates,
    and the adapter must keep index correspondence: row i of every `step`
    output refers to the i-th point ever registered via `start`/`add_points`.
    """

    name: str = "tracker"
    capabilities: TrackerCapabilities = TrackerCapabilities()

    @abstractmethod
    def start(self, frame: Frame, points: np.ndarray) -> None:
        """Reset and begin tracking `points` anchored on `frame`."""

    @abstractmethod
    def step(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        """Advance to `frame`; return (positions (N,2) float, visible (N,) bool)."""

    def add_points(self, frame: Frame, points: np.ndarray) -> None:
        """Register additional points anchored on `frame` (appended after
        existing rows)."""
        raise CapabilityError(f"{self.name} does not accept mid-stream queries")

    def close(self) -> None:
        """Release backend resources; no-op by default."""


@dataclass
class _InstanceSlice:
    instance_id: int
    offset: int
    count: int
    active: bool = True


@dataclass
class TrackerSession:
    """Streaming state for one tracked video. Single-caller: serialize steps."""

    adapter: TrackerAdapter
    window_size: int
    query_sets: list[QueryPointSet]
    frame_buffer: deque[Frame]
    slices: list[_InstanceSlice] = field(default_factory=list)
    last_frame_index: int = -1
    last_results: list[TrackedPointSet] = field(default_factory=list)

    @property
    def point_count(self) -> int:
        return sum(s.count for s in self.slices)

    def active_instance_ids(self) -> list[int]:
        return [s.instance_id for s in self.slices if s.active]


def _points_array(queries: Sequence[QueryPointSet]) -> np.ndarray:
    rows = [(p.x, p.y) for qs in queries for p in qs.points]
    return np.array(rows, dtype=np.float64).reshape(len(rows), 2)


def _validate_queries(queries: Sequence[QueryPointSet], frame: Frame) -> None:
    if not queries:
        raise InvalidArgumentError("at least one query set is required")
    seen: set[int] = set()
    for qs in queries:
        if qs.instance_id in seen:
            raise InvalidArgumentError(f"duplicate instance id {qs.instance_id}")
        seen.add(qs.instance_id)
        for p in qs.points:
            if not point_in_bounds(p, frame.height, frame.width):
                raise InvalidArgumentError(
                    f"query point ({p.x}, {p.y}) outside frame {frame.index} "
                    f"bounds {frame.height}x{frame.width}"
                )


def _birth_results(queries: Sequence[QueryPointSet], frame_index: int) -> list[TrackedPointSet]:
    return [
        TrackedPointSet(
            instance_id=qs.instance_id,
            frame_index=frame_index,
            points=qs.points,
            visible=tuple(True for _ in qs.points),
        )
        for qs in queries
    ]


def tracker_init(
    adapter: TrackerAdapter,
    first_frame: Frame,
    queries: Sequence[QueryPointSet],
    window_size: int = DEFAULT_WINDOW_SIZE,
) -> TrackerSession:
    """Open a session: at the birth frame every query point is its own track,
    reported visible."""
    if window_size < 1:
        raise InvalidArgumentError(f"window_size must be >= 1, got {window_size}")
    _validate_queries(queries, first_frame)
    pts = _points_array(queries)
    try:
        adapter.start(first_frame, pts)
    except Exception as exc:
        raise TrackerBackendError(adapter.name, str(exc), frame_index=first_frame.index) from exc
    session = TrackerSession(
        adapter=adapter,
        window_size=window_size,
        query_sets=list(queries),
        frame_buffer=deque([first_frame], maxlen=window_size),
    )
    offset = 0
    for qs in queries:
        session.slices.append(_InstanceSlice(qs.instance_id, offset, len(qs.points)))
        offset += len(qs.points)
    session.last_frame_index = first_frame.index
    session.last_results = _birth_results(queries, first_frame.index)
    return session


def tracker_step(session: TrackerSession, frame: Frame) -> list[TrackedPointSet]:
    """Advance one frame; returns a TrackedPointSet per active instance."""
    if frame.index <= session.last_frame_index:
        raise OrderingError(
            f"frame index {frame.index} not after {session.last_frame_index}"
        )
    adapter = session.adapter
    try:
        positions, visible = adapter.step(frame)
    except Exception as exc:
        raise TrackerBackendError(adapter.name, str(exc), frame_index=frame.index) from exc
    positions = np.asarray(positions, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    n = session.point_count
    if positions.shape != (n, 2) or visible.shape != (n,):
        raise TrackerBackendError(
            adapter.name,
            f"expected ({n}, 2) positions and ({n},) visibility, "
            f"got {positions.shape} and {visible.shape}",
            frame_index=frame.index,
        )
    if not np.isfinite(positions).all():
        raise TrackerBackendError(
            adapter.name, "non-finite track positions", frame_index=frame.index
        )
    results = []
    for s in session.slices:
        if not s.active:
            continue
        chunk = positions[s.offset : s.offset + s.count]
        vis = visible[s.offset : s.offset + s.count]
        results.append(
            TrackedPointSet(
                instance_id=s.instance_id,
                frame_index=frame.index,
                points=tuple(Point(float(x), float(y)) for x, y in chunk),
                visible=tuple(bool(v) for v in vis),
            )
        )
    session.frame_buffer.append(frame)
    session.last_frame_index = frame.index
    session.last_results = results
    return results


def tracker_add_queries(
    session: TrackerSession,
    new_queries: Sequence[QueryPointSet],
    at_frame: Frame,
    replace: bool = False,
) -> TrackerSession:
    """Register new instances mid-stream, tracked from `at_frame` onward.

    Existing trajectories are unaffected. With replace=True an already-tracked
    instance id is allowed: its old slice is deactivated (the backend keeps
    tracking those points, they just stop being reported) and the new points
    take over the id.
    """
    if not session.adapter.capabilities.supports_midstream_queries:
        raise CapabilityError(
            f"{session.adapter.name} does not accept mid-stream queries"
        )
    if at_frame.index != session.last_frame_index:
        raise OrderingError(
            f"queries must be added at the current frame "
            f"{session.last_frame_index}, got {at_frame.index}"
        )
    if not new_queries:
        raise InvalidArgumentError("at least one query set is required")
    active = set(session.active_instance_ids())
    seen: set[int] = set()
    for qs in new_queries:
        if qs.instance_id in seen:
            raise InvalidArgumentError(f"duplicate instance id {qs.instance_id}")
        seen.add(qs.instance_id)
        if qs.instance_id in active and not replace:
            raise InvalidArgumentError(
                f"instance {qs.instance_id} is already tracked"
            )
        for p in qs.points:
            if not point_in_bounds(p, at_frame.height, at_frame.width):
                raise InvalidArgumentError(
                    f"query point ({p.x}, {p.y}) outside frame {at_frame.index} bounds"
                )
    pts = _points_array(new_queries)
    try:
        session.adapter.add_points(at_frame, pts)
    except CapabilityError:
        raise
    except Exception as exc:
        raise TrackerBackendError(
            session.adapter.name, str(exc), frame_index=at_frame.index
        ) from exc
    offset = session.point_count
    for qs in new_queries:
        if replace:
            for s in session.slices:
                if s.instance_id == qs.instance_id:
                    s.active = False
        session.slices.append(_InstanceSlice(qs.instance_id, offset, len(qs.points)))
        offset += len(qs.points)
        session.query_sets.append(qs)
    kept = [r for r in session.last_results if r.instance_id not in seen]
    session.last_results = kept + _birth_results(new_queries, at_frame.index)
    return session


def tracker_step_chunk(
    session: TrackerSession, frames: Sequence[Frame]
) -> list[list[TrackedPointSet]]:
    """Feed several frames; equivalent to calling tracker_step on each in
    order."""
    return [tracker_step(session, f) for f in frames]


class OracleTracker(TrackerAdapter):
    """Replays a synthetic scene's analytic motion field exactly.

    Exists to isolate non-tracker bugs: with this adapter, any pipeline error
    cannot be blamed on tracking drift.
    """

    name = "oracle"
    capabilities = TrackerCapabilities()

    def __init__(self, motion: SceneMotion):
        self._motion = motion
        self._births: list[tuple[Point, int]] = []

    def start(self, frame: Frame, points: np.ndarray) -> None:
        self._births = [(Point(float(x), float(y)), frame.index) for x, y in points]

    def add_points(self, frame: Frame, points: np.ndarray) -> None:
        self._births.extend(
            (Point(float(x), float(y)), frame.index) for x, y in points
        )

    def step(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        n = len(self._births)
        positions = np.empty((n, 2), dtype=np.float64)
        visible = np.empty(n, dtype=bool)
        for i, (birth, birth_frame) in enumerate(self._births):
            x, y, vis = self._motion.locate(birth, birth_frame, frame.index)
            positions[i] = (x, y)
            visible[i] = vis
        return positions, visible


class NccBlockTracker(TrackerAdapter):
    """Per-point normalized cross-correlation template search, frame to frame.

    A (2r+1)-square grayscale template around each point is matched within a
    search window on the next frame; the peak is refined to sub-pixel by a
    1-D parabolic fit per axis. A point is visible when the peak correlation
    is >= 0.5 and its position stays in bounds; the template is refreshed on
    every visible step, and an invisible point holds its last position so the
    search can re-acquire the target when it re-appears.
    """

    name = "ncc"
    capabilities = TrackerCapabilities()

    def __init__(self, patch_radius: int = 10, search_radius: int = 16, min_corr: float = 0.5):
        if patch_radius < 1 or search_radius < 1:
            raise InvalidArgumentError("patch_radius and search_radius must be >= 1")
        self.patch_radius = patch_radius
        self.search_radius = search_radius
        self.min_corr = min_corr
        self._positions: list[tuple[float, float]] = []
        self._templates: list[np.ndarray] = []

    def _padded(self, frame: Frame) -> np.ndarray:
        pad = self.patch_radius + self.search_radius
        return np.pad(to_grayscale(frame.pixels), pad, mode="edge")

    def _extract(self, padded: np.ndarray, x: float, y: float) -> np.ndarray:
        pad = self.patch_radius + self.search_radius
        r = int(np.floor(y)) + pad
        c = int(np.floor(x)) + pad
        p = self.patch_radius
        return padded[r - p : r + p + 1, c - p : c + p + 1].copy()

    def start(self, frame: Frame, points: np.ndarray) -> None:
        self._positions = []
        self._templates = []
        self.add_points(frame, points)

    def add_points(self, frame: Frame, points: np.ndarray) -> None:
        padded = self._padded(frame)
        for x, y in points:
            self._positions.append((float(x), float(y)))
            self._templates.append(self._extract(padded, float(x), float(y)))

    @staticmethod
    def _parabolic_offset(lo: float, mid: float, hi: float) -> float:
        denom = lo - 2.0 * mid + hi
        if denom >= -1e-12:
            return 0.0
        return float(np.clip((lo - hi) / (2.0 * denom), -0.5, 0.5))

    def step(self, frame: Frame) -> tuple[np.ndarray, np.ndarray]:
        padded = self._padded(frame)
        pad = self.patch_radius + self.search_radius
        p, s = self.patch_radius, self.search_radius
        n = len(self._positions)
        positions = np.empty((n, 2), dtype=np.float64)
        visible = np.zeros(n, dtype=bool)
        for i in range(n):
            x, y = self._positions[i]
            template = self._templates[i]
            r = int(np.floor(y)) + pad
            c = int(np.floor(x)) + pad
            window = padded[r - p - s : r + p + s + 1, c - p - s : c + p + s + 1]
            views = sliding_window_view(window, template.shape)
            t = template - template.mean()
            t_norm = float(np.sqrt((t * t).sum()))
            centered = views - views.mean(axis=(2, 3), keepdims=True)
            num = np.einsum("ijkl,kl->ij", centered, t)
            den = np.sqrt((centered * centered).sum(axis=(2, 3))) * t_norm
            with np.errstate(invalid="ignore", divide="ignore"):
                scores = np.where(den > 1e-12, num / np.maximum(den, 1e-12), 0.0)
            pr, pc = np.unravel_index(int(np.argmax(scores)), scores.shape)
            peak = float(scores[pr, pc])
            dy = dx = 0.0
            # A near-exact peak is already integer-aligned: fitting a parabola
            # through its (asymmetric) neighbours would only inject texture
            # bias, so refine only genuinely fractional matches.
            if peak < 0.9999:
                if 0 < pr < scores.shape[0] - 1:
                    dy = self._parabolic_offset(
                        scores[pr - 1, pc], peak, scores[pr + 1, pc]
                    )
                if 0 < pc < scores.shape[1] - 1:
                    dx = self._parabolic_offset(
                        scores[pr, pc - 1], peak, scores[pr, pc + 1]
                    )
            # Peak (pr, pc) places the template center cell at this offset
            # from the current center cell.
            new_x = np.floor(x) + 0.5 + (pc - s) + dx
            new_y = np.floor(y) + 0.5 + (pr - s) + dy
            in_bounds = 0.0 <= new_x < frame.width and 0.0 <= new_y < frame.height
            if peak >= self.min_corr and in_bounds:
                visible[i] = True
                self._positions[i] = (float(new_x), float(new_y))
                self._templates[i] = self._extract(padded, float(new_x), float(new_y))
            positions[i] = self._positions[i]
        return positions, visible
