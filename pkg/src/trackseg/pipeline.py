"""End-to-end streaming orchestration: initial mask -> query sampling ->
per-frame tracking -> visibility-filtered prompting -> segmentation.

Policy decisions owned here:
  - occluded points are excluded from prompts but keep being tracked;
  - an instance with no visible points this frame gets an empty mask and no
    segmenter call;
  - an instance whose visible count stays below min_visible_points for
    reinit_patience_frames consecutive frames is re-seeded with fresh query
    points sampled on its last non-empty mask (tracker session restart when
    the adapter cannot take mid-stream queries).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

from .core import (
    BinaryMask,
    BoxPrompt,
    Frame,
    InstanceMaskSet,
    Point,
    QueryPointSet,
    TrackedPointSet,
    mask_payload,
    point_in_bounds,
)
from .errors import (
    EmptyRegionError,
    InvalidArgumentError,
    TracksegError,
)
from .maskio import load_mask_file
from .sampling import SamplingStrategy, sample_query_points
from .segmenters import (
    PromptBundle,
    SegmenterAdapter,
    init_mask_from_box,
    init_mask_from_text,
    segment,
)
from .stats import latency_summary
from .trackers import (
    TrackerAdapter,
    TrackerSession,
    tracker_add_queries,
    tracker_init,
    tracker_step,
)
from .video import VideoSource

INIT_MODES = ("text", "box", "points", "mask_file")


@dataclass(frozen=True)
class PipelineConfig:
    strategy: SamplingStrategy = SamplingStrategy()
    init_mode: str = "text"
    init_text: str | None = None
    init_boxes: tuple[BoxPrompt, ...] = ()
    init_points: Mapping[int, tuple[Point, ...]] | None = None
    init_mask_path: str | None = None
    init_mask_encoding: str = "palette"
    min_visible_points: int = 2
    reinit_patience_frames: int = 3
    window_size: int = 4

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise InvalidArgumentError(
                f"unknown init_mode {self.init_mode!r}, expected one of {INIT_MODES}"
            )
        if self.min_visible_points < 1:
            raise InvalidArgumentError("min_visible_points must be >= 1")
        if self.reinit_patience_frames < 1:
            raise InvalidArgumentError("reinit_patience_frames must be >= 1")
        if self.window_size < 1:
            raise InvalidArgumentError("window_size must be >= 1")


@dataclass(frozen=True)
class FrameResult:
    frame_index: int
    masks: InstanceMaskSet
    tracked: tuple[TrackedPointSet, ...]
    prompts_used: tuple[PromptBundle, ...]
    timings_ms: Mapping[str, float]
    reinitialized: tuple[int, ...] = ()


@dataclass
class PipelineState:
    """Mutable per-run state; single logical thread of control."""

    config: PipelineConfig
    tracker: TrackerAdapter
    segmenter: SegmenterAdapter
    session: TrackerSession
    current_frame: Frame
    last_nonempty_mask: dict[int, BinaryMask] = field(default_factory=dict)
    low_visibility_streak: dict[int, int] = field(default_factory=dict)
    reinit_events: list[tuple[int, int]] = field(default_factory=list)

    def active_instance_ids(self) -> list[int]:
        return sorted(self.session.active_instance_ids())


@dataclass
class RunSummary:
    frame_count: int = 0
    instance_ids: tuple[int, ...] = ()
    latency_ms: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    reinit_events: tuple[tuple[int, int], ...] = ()
    dropped_frames: int = 0
    error: str | None = None


def _initial_masks(
    segmenter: SegmenterAdapter, frame: Frame, config: PipelineConfig
) -> tuple[InstanceMaskSet, tuple[PromptBundle, ...]]:
    mode = config.init_mode
    if mode == "text":
        if not config.init_text:
            raise InvalidArgumentError("init_mode text requires init_text")
        masks = init_mask_from_text(segmenter, frame, config.init_text)
        prompts = tuple(
            PromptBundle(instance_id=i, text=config.init_text)
            for i in masks.instance_ids
        )
        return masks, prompts
    if mode == "box":
        if not config.init_boxes:
            raise InvalidArgumentError("init_mode box requires init_boxes")
        masks = init_mask_from_box(segmenter, frame, list(config.init_boxes))
        prompts = tuple(
            PromptBundle(instance_id=i, box=b)
            for i, b in enumerate(config.init_boxes)
        )
        return masks, prompts
    if mode == "points":
        if not config.init_points:
            raise InvalidArgumentError("init_mode points requires init_points")
        prompts = tuple(
            PromptBundle(instance_id=iid, positive_points=tuple(pts))
            for iid, pts in sorted(config.init_points.items())
        )
        masks = segment(segmenter, frame, prompts)
        for iid in masks.instance_ids:
            if masks.masks[iid].is_empty:
                raise EmptyRegionError(
                    f"instance {iid}: no region found at the given points"
                )
        return masks, prompts
    # mask_file
    if not config.init_mask_path:
        raise InvalidArgumentError("init_mode mask_file requires init_mask_path")
    masks = load_mask_file(
        config.init_mask_path, config.init_mask_encoding, frame_index=frame.index
    )
    if (masks.dims or (frame.height, frame.width)) != (frame.height, frame.width):
        raise InvalidArgumentError(
            f"mask file dimensions {masks.dims} do not match the video "
            f"{frame.height}x{frame.width}"
        )
    if not masks.masks:
        raise EmptyRegionError("mask file contains no instances")
    return masks, ()


def _queries_for(
    frame: Frame, masks: InstanceMaskSet, config: PipelineConfig
) -> list[QueryPointSet]:
    if config.init_mode == "points":
        # User clicks become the query points verbatim.
        assert config.init_points is not None
        return [
            QueryPointSet(
                instance_id=iid, points=tuple(pts), birth_frame=frame.index
            )
            for iid, pts in sorted(config.init_points.items())
        ]
    return sample_query_points(frame, masks, config.strategy)


def initialize(
    video: VideoSource,
    config: PipelineConfig,
    tracker: TrackerAdapter,
    segmenter: SegmenterAdapter,
) -> tuple[PipelineState, FrameResult, Iterator[Frame]]:
    """Consume the first frame, build initial masks and the tracker session.

    Returns the state, the frame-0 result, and the iterator holding the rest
    of the stream.
    """
    frames = iter(video)
    try:
        first = next(frames)
    except StopIteration:
        raise InvalidArgumentError("video yielded no frames") from None
    t0 = time.perf_counter()
    masks, prompts = _initial_masks(segmenter, first, config)
    queries = _queries_for(first, masks, config)
    segment_ms = (time.perf_counter() - t0) * 1000.0
    session = tracker_init(tracker, first, queries, config.window_size)
    total_ms = (time.perf_counter() - t0) * 1000.0
    state = PipelineState(
        config=config,
        tracker=tracker,
        segmenter=segmenter,
        session=session,
        current_frame=first,
    )
    for iid in masks.instance_ids:
        if not masks.masks[iid].is_empty:
            state.last_nonempty_mask[iid] = masks.masks[iid]
        state.low_visibility_streak[iid] = 0
    result = FrameResult(
        frame_index=first.index,
        masks=masks,
        tracked=tuple(session.last_results),
        prompts_used=prompts,
        timings_ms={"track": 0.0, "segment": segment_ms, "total": total_ms},
    )
    return state, result, frames


def _visible_prompt(tracked: TrackedPointSet, frame: Frame) -> PromptBundle | None:
    pts = tuple(
        p
        for p, v in zip(tracked.points, tracked.visible)
        if v and point_in_bounds(p, frame.height, frame.width)
    )
    if not pts:
        return None
    return PromptBundle(instance_id=tracked.instance_id, positive_points=pts)


def _reinit_instances(
    state: PipelineState, frame: Frame, instance_ids: Sequence[int]
) -> list[int]:
    """Re-seed the given instances with fresh strategy-many query points
    sampled on each one's last non-empty mask."""
    done: list[int] = []
    to_seed = [i for i in instance_ids if i in state.last_nonempty_mask]
    if not to_seed:
        return done
    mask_set = InstanceMaskSet(
        frame_index=frame.index,
        masks={i: state.last_nonempty_mask[i] for i in to_seed},
    )
    queries = sample_query_points(frame, mask_set, state.config.strategy)
    if state.tracker.capabilities.supports_midstream_queries:
        tracker_add_queries(state.session, queries, frame, replace=True)
        done.extend(q.instance_id for q in queries)
    else:
        # Restart fallback: re-seed every active instance so one session
        # carries them all.
        others = [
            i
            for i in state.active_instance_ids()
            if i not in to_seed and i in state.last_nonempty_mask
        ]
        if others:
            other_set = InstanceMaskSet(
                frame_index=frame.index,
                masks={i: state.last_nonempty_mask[i] for i in others},
            )
            queries = queries + sample_query_points(
                frame, other_set, state.config.strategy
            )
        queries.sort(key=lambda q: q.instance_id)
        state.session = tracker_init(
            state.tracker, frame, queries, state.config.window_size
        )
        done.extend(q.instance_id for q in queries)
    for iid in done:
        state.low_visibility_streak[iid] = 0
        state.reinit_events.append((frame.index, iid))
    return done


def process_frame(state: PipelineState, frame: Frame) -> FrameResult:
    """Track, prompt with visible points only, segment, apply re-init policy."""
    t_start = time.perf_counter()
    tracked = tracker_step(state.session, frame)
    t_track = time.perf_counter()

    prompts: list[PromptBundle] = []
    visible_counts: dict[int, int] = {}
    for ts in tracked:
        bundle = _visible_prompt(ts, frame)
        visible_counts[ts.instance_id] = (
            len(bundle.positive_points) if bundle else 0
        )
        if bundle is not None:
            prompts.append(bundle)

    if prompts:
        seg_set = segment(state.segmenter, frame, prompts)
    else:
        seg_set = InstanceMaskSet(frame_index=frame.index, masks={})
    t_segment = time.perf_counter()

    masks: dict[int, BinaryMask] = {}
    for ts in tracked:
        iid = ts.instance_id
        if iid in seg_set.masks:
            masks[iid] = seg_set.masks[iid]
            if not masks[iid].is_empty:
                state.last_nonempty_mask[iid] = masks[iid]
        else:
            masks[iid] = BinaryMask.zeros(frame.height, frame.width)

    needs_reinit: list[int] = []
    for iid, count in visible_counts.items():
        if count < state.config.min_visible_points:
            streak = state.low_visibility_streak.get(iid, 0) + 1
            state.low_visibility_streak[iid] = streak
            if streak >= state.config.reinit_patience_frames:
                needs_reinit.append(iid)
        else:
            state.low_visibility_streak[iid] = 0
    reinitialized = _reinit_instances(state, frame, needs_reinit) if needs_reinit else []

    state.current_frame = frame
    t_end = time.perf_counter()
    return FrameResult(
        frame_index=frame.index,
        masks=InstanceMaskSet(frame_index=frame.index, masks=masks),
        tracked=tuple(tracked),
        prompts_used=tuple(prompts),
        timings_ms={
            "track": (t_track - t_start) * 1000.0,
            "segment": (t_segment - t_track) * 1000.0,
            "total": (t_end - t_start) * 1000.0,
        },
        reinitialized=tuple(reinitialized),
    )


def add_instance(state: PipelineState, prompt: PromptBundle) -> BinaryMask:
    """Segment a user prompt at the current frame and track it from here on.

    Raises empty-region (state unchanged) when the prompt hits nothing.
    """
    frame = state.current_frame
    if prompt.instance_id in state.session.active_instance_ids():
        raise InvalidArgumentError(
            f"instance {prompt.instance_id} is already tracked"
        )
    seg_set = segment(state.segmenter, frame, [prompt])
    mask = seg_set.masks[prompt.instance_id]
    if mask.is_empty:
        raise EmptyRegionError(
            f"prompt for instance {prompt.instance_id} found no region"
        )
    mask_set = InstanceMaskSet(
        frame_index=frame.index, masks={prompt.instance_id: mask}
    )
    queries = sample_query_points(frame, mask_set, state.config.strategy)
    if state.tracker.capabilities.supports_midstream_queries:
        tracker_add_queries(state.session, queries, frame)
    else:
        existing = [
            i for i in state.active_instance_ids() if i in state.last_nonempty_mask
        ]
        if existing:
            existing_set = InstanceMaskSet(
                frame_index=frame.index,
                masks={i: state.last_nonempty_mask[i] for i in existing},
            )
            queries = queries + sample_query_points(
                frame, existing_set, state.config.strategy
            )
        queries.sort(key=lambda q: q.instance_id)
        state.session = tracker_init(
            state.tracker, frame, queries, state.config.window_size
        )
    state.last_nonempty_mask[prompt.instance_id] = mask
    state.low_visibility_streak[prompt.instance_id] = 0
    return mask


def iter_run(
    video: VideoSource,
    config: PipelineConfig,
    tracker: TrackerAdapter,
    segmenter: SegmenterAdapter,
) -> Iterator[FrameResult]:
    """Yield FrameResults in frame order for the whole stream."""
    state, first_result, frames = initialize(video, config, tracker, segmenter)
    yield first_result
    for frame in frames:
        yield process_frame(state, frame)


def run(
    video: VideoSource,
    config: PipelineConfig,
    tracker: TrackerAdapter,
    segmenter: SegmenterAdapter,
    sink: Callable[[FrameResult], None] | None = None,
) -> RunSummary:
    """Drive the full stream into `sink`; first error aborts with a partial
    summary carrying the message."""
    timings: dict[str, list[float]] = {"track": [], "segment": [], "total": []}
    summary = RunSummary()
    state = None

    def emit(result: FrameResult) -> None:
        if sink:
            sink(result)
        summary.frame_count += 1
        for stage, values in timings.items():
            values.append(result.timings_ms[stage])

    try:
        state, first_result, frames = initialize(video, config, tracker, segmenter)
        emit(first_result)
        for frame in frames:
            emit(process_frame(state, frame))
    except TracksegError as exc:
        summary.error = str(exc)
    if state is not None:
        summary.instance_ids = tuple(state.active_instance_ids())
        summary.reinit_events = tuple(state.reinit_events)
    if summary.frame_count:
        summary.latency_ms = {
            stage: latency_summary(values) for stage, values in timings.items()
        }
    summary.dropped_frames = getattr(video, "dropped", 0)
    return summary


def frame_result_record(result: FrameResult, include_timings: bool = True) -> dict:
    """JSON-serializable per-frame record: instance -> RLE plus track data."""
    record = {
        "frame_index": result.frame_index,
        "instances": {
            str(iid): mask_payload(result.masks.masks[iid])
            for iid in result.masks.instance_ids
        },
        "tracked": [
            {
                "instance_id": ts.instance_id,
                "points": [[p.x, p.y] for p in ts.points],
                "visible": list(ts.visible),
            }
            for ts in result.tracked
        ],
        "reinitialized": list(result.reinitialized),
    }
    if include_timings:
        record["timings_ms"] = dict(result.timings_ms)
    return record


def with_strategy_seed(config: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(config, strategy=replace(config.strategy, seed=seed))
