"""End-to-end pipeline behavior on analytic synthetic scenes."""

import json
import time

import numpy as np
import pytest

from trackseg.core import BinaryMask, Point
from trackseg.errors import (
    EmptyRegionError,
    InvalidArgumentError,
    TrackerBackendError,
)
from trackseg.pipeline import (
    FrameResult,
    PipelineConfig,
    add_instance,
    frame_result_record,
    initialize,
    iter_run,
    process_frame,
    run,
)
from trackseg.sampling import SamplingStrategy
from trackseg.segmenters import PromptBundle, ThresholdFloodSegmenter
from trackseg.synth import DiskSpec, OccluderSpec, Scene, SceneSpec
from trackseg.trackers import NccBlockTracker, OracleTracker, TrackerCapabilities
from trackseg.video import ArraySource


def iou(a: BinaryMask, b: BinaryMask) -> float:
    inter = np.logical_and(a.bits, b.bits).sum()
    union = np.logical_or(a.bits, b.bits).sum()
    return inter / union if union else 1.0


def moving_disk_scene(frame_count=40, velocity=(2.0, 0.0), occluders=()):
    return Scene(
        SceneSpec(
            height=96,
            width=128,
            frame_count=frame_count,
            disks=(DiskSpec(center=(30.5, 48.5), radius=12.0, velocity=velocity),),
            occluders=occluders,
        )
    )


def scene_source(scene):
    return ArraySource([scene.frame(t) for t in range(scene.spec.frame_count)])


def text_config(**overrides):
    defaults = dict(
        strategy=SamplingStrategy("kmedoids", 5, seed=0),
        init_mode="text",
        init_text="bright instrument",
    )
    defaults.update(overrides)
    return PipelineConfig(**defaults)


def serialized(results):
    return json.dumps(
        [frame_result_record(r, include_timings=False) for r in results],
        sort_keys=True,
    )


class TestInitialize:
    def test_text_init_starts_pipeline(self):
        scene = moving_disk_scene()
        state, first, _ = initialize(
            scene_source(scene),
            text_config(),
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        assert first.frame_index == 0
        assert first.masks.instance_ids == (0,)
        assert iou(first.masks.masks[0], scene.gt_masks(0).masks[0]) >= 0.99
        [tracked] = first.tracked
        assert len(tracked.points) == 5
        assert all(tracked.visible)
        assert first.prompts_used[0].text == "bright instrument"

    def test_points_init_uses_clicks_verbatim(self):
        scene = moving_disk_scene()
        clicks = (Point(30.5, 48.5), Point(33.5, 45.5), Point(27.5, 51.5))
        config = PipelineConfig(init_mode="points", init_points={4: clicks})
        state, first, _ = initialize(
            scene_source(scene),
            config,
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        [tracked] = first.tracked
        assert tracked.instance_id == 4
        assert tracked.points == clicks
        assert iou(first.masks.masks[4], scene.gt_masks(0).masks[0]) >= 0.99

    def test_points_init_on_background_rejected(self):
        scene = moving_disk_scene()
        config = PipelineConfig(
            init_mode="points", init_points={0: (Point(100.5, 10.5),)}
        )
        with pytest.raises(EmptyRegionError):
            initialize(
                scene_source(scene),
                config,
                OracleTracker(scene.motion()),
                ThresholdFloodSegmenter(),
            )

    def test_empty_video_rejected(self):
        scene = moving_disk_scene()
        with pytest.raises(InvalidArgumentError):
            initialize(
                ArraySource([]),
                text_config(),
                OracleTracker(scene.motion()),
                ThresholdFloodSegmenter(),
            )

    def test_mask_file_init(self, tmp_path):
        from trackseg.maskio import save_instance_masks_png

        scene = moving_disk_scene()
        path = tmp_path / "first.png"
        save_instance_masks_png(path, scene.gt_masks(0))
        config = text_config(init_mode="mask_file", init_mask_path=str(path))
        state, first, _ = initialize(
            scene_source(scene),
            config,
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        assert first.masks.masks[0] == scene.gt_masks(0).masks[0]

    def test_config_validation(self):
        with pytest.raises(InvalidArgumentError):
            PipelineConfig(init_mode="telepathy")
        with pytest.raises(InvalidArgumentError):
            PipelineConfig(min_visible_points=0)
        with pytest.raises(InvalidArgumentError):
            PipelineConfig(reinit_patience_frames=0)


class TestStreamAccuracy:
    def test_oracle_tracker_matches_gt(self):
        scene = moving_disk_scene(frame_count=40)
        results = []
        summary = run(
            scene_source(scene),
            text_config(),
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
            sink=results.append,
        )
        assert summary.error is None
        assert summary.frame_count == 40
        scores = [
            iou(r.masks.masks[0], scene.gt_masks(r.frame_index).masks[0])
            for r in results
        ]
        assert np.mean(scores) >= 0.95

    def test_ncc_tracker_close_to_gt(self):
        scene = moving_disk_scene(frame_count=30)
        results = []
        summary = run(
            scene_source(scene),
            text_config(),
            NccBlockTracker(),
            ThresholdFloodSegmenter(),
            sink=results.append,
        )
        assert summary.error is None
        scores = [
            iou(r.masks.masks[0], scene.gt_masks(r.frame_index).masks[0])
            for r in results
        ]
        assert np.mean(scores) >= 0.90

    def test_prompts_are_visible_and_in_bounds(self):
        scene = moving_disk_scene(frame_count=40, velocity=(3.0, 0.5))
        for result in self._iter(scene):
            tracked_by_id = {t.instance_id: t for t in result.tracked}
            for bundle in result.prompts_used:
                if bundle.text is not None:
                    continue
                ts = tracked_by_id[bundle.instance_id]
                visible_pts = {
                    (p.x, p.y) for p, v in zip(ts.points, ts.visible) if v
                }
                for p in bundle.positive_points:
                    assert (p.x, p.y) in visible_pts
                    assert 0 <= p.x < 128 and 0 <= p.y < 96

    def _iter(self, scene):
        return iter_run(
            scene_source(scene),
            text_config(),
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )

    def test_mask_ids_match_tracked_ids(self):
        scene = moving_disk_scene(frame_count=20)
        for result in self._iter(scene):
            assert result.masks.instance_ids == tuple(
                sorted(t.instance_id for t in result.tracked)
            )
            assert all(v >= 0 for v in result.timings_ms.values())


class TestOcclusion:
    def occluded_scene(self):
        return moving_disk_scene(
            frame_count=24,
            velocity=(2.0, 0.0),
            occluders=(OccluderSpec(34.0, 36.0, 69.0, 61.0, 8, 14),),
        )

    def run_results(self, scene, **config_overrides):
        config = text_config(reinit_patience_frames=10, **config_overrides)
        results = []
        summary = run(
            scene_source(scene),
            config,
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
            sink=results.append,
        )
        assert summary.error is None
        return results

    def test_empty_mask_during_full_occlusion_and_recovery(self):
        scene = self.occluded_scene()
        results = self.run_results(scene)
        for t in range(8, 14):
            assert results[t].masks.masks[0].is_empty
            assert not any(results[t].tracked[0].visible)
        # Tracking continued through the occlusion: reappearance is caught
        # within two frames with IoU >= 0.9 against ground truth.
        recovered = [
            iou(results[t].masks.masks[0], scene.gt_masks(t).masks[0])
            for t in (14, 15)
        ]
        assert max(recovered) >= 0.9

    def test_no_segment_call_when_nothing_visible(self):
        calls = []

        class Probe(ThresholdFloodSegmenter):
            def predict(self, pixels, prompts):
                calls.append(len(prompts))
                return super().predict(pixels, prompts)

        scene = self.occluded_scene()
        config = text_config(reinit_patience_frames=10)
        state, first, frames = initialize(
            scene_source(scene), config, OracleTracker(scene.motion()), Probe()
        )
        calls.clear()
        for frame in frames:
            process_frame(state, frame)
        # 23 subsequent frames, 6 fully occluded -> no predict call for those.
        assert len(calls) == 17


class TestReinitPolicy:
    def clicks_scene(self):
        # Static disk plus a permanently-occluded background corner: 4 of the
        # 5 click-born tracks go dark at frame 1 while the disk stays clean.
        spec = SceneSpec(
            height=96,
            width=128,
            frame_count=12,
            disks=(DiskSpec(center=(30.5, 48.5), radius=12.0),),
            occluders=(OccluderSpec(95.0, 5.0, 120.0, 20.0, 1, 1000),),
        )
        return Scene(spec)

    def config(self):
        clicks = (
            Point(30.5, 48.5),
            Point(100.5, 10.5),
            Point(105.5, 12.5),
            Point(110.5, 8.5),
            Point(101.5, 15.5),
        )
        return PipelineConfig(
            strategy=SamplingStrategy("kmedoids", 5, seed=3),
            init_mode="points",
            init_points={0: clicks},
            min_visible_points=2,
            reinit_patience_frames=3,
        )

    def collect(self, tracker_cls):
        scene = self.clicks_scene()
        tracker = tracker_cls(scene.motion())
        state, first, frames = initialize(
            scene_source(scene), self.config(), tracker, ThresholdFloodSegmenter()
        )
        results = [first]
        for frame in frames:
            results.append(process_frame(state, frame))
        return state, results

    def test_reinit_restores_prompt_count(self):
        state, results = self.collect(OracleTracker)
        # Visible count drops to 1 at frames 1-3; the third strike triggers
        # re-sampling at frame 3.
        assert results[3].reinitialized == (0,)
        assert (3, 0) in state.reinit_events
        for t in range(1, 3):
            assert len(results[t].prompts_used[0].positive_points) == 1
        for t in range(4, 12):
            [bundle] = results[t].prompts_used
            assert len(bundle.positive_points) == 5
            assert all(results[t].tracked[0].visible)

    def test_masks_stay_correct_through_reinit(self):
        scene = self.clicks_scene()
        state, results = self.collect(OracleTracker)
        for t in range(12):
            assert iou(results[t].masks.masks[0], scene.gt_masks(t).masks[0]) >= 0.99

    def test_restart_fallback_without_midstream_capability(self):
        class NoMidstream(OracleTracker):
            capabilities = TrackerCapabilities(supports_midstream_queries=False)

        state, results = self.collect(NoMidstream)
        assert results[3].reinitialized == (0,)
        for t in range(4, 12):
            [bundle] = results[t].prompts_used
            assert len(bundle.positive_points) == 5

    def test_streak_resets_when_visibility_recovers(self):
        # Two dark frames, one clean frame, two dark frames: streak never
        # reaches three, so no re-init happens.
        spec = SceneSpec(
            height=96,
            width=128,
            frame_count=8,
            disks=(DiskSpec(center=(30.5, 48.5), radius=12.0),),
            occluders=(
                OccluderSpec(95.0, 5.0, 120.0, 20.0, 1, 3),
                OccluderSpec(95.0, 5.0, 120.0, 20.0, 4, 6),
            ),
        )
        scene = Scene(spec)
        tracker = OracleTracker(scene.motion())
        state, first, frames = initialize(
            scene_source(scene), self.config(), tracker, ThresholdFloodSegmenter()
        )
        results = [process_frame(state, f) for f in frames]
        assert all(r.reinitialized == () for r in results)
        assert state.reinit_events == []


class TestAddInstance:
    def two_disk_scene(self):
        spec = SceneSpec(
            height=96,
            width=128,
            frame_count=24,
            disks=(
                DiskSpec(center=(30.5, 48.5), radius=12.0, velocity=(1.0, 0.0)),
                DiskSpec(center=(100.5, 24.5), radius=9.0),
            ),
        )
        return Scene(spec)

    def test_instance_added_mid_stream(self):
        scene = self.two_disk_scene()
        # Text init sees both disks; restrict to one by clicking instead.
        config = PipelineConfig(
            strategy=SamplingStrategy("kmedoids", 5, seed=1),
            init_mode="points",
            init_points={0: (Point(30.5, 48.5),)},
            min_visible_points=1,
        )
        tracker = OracleTracker(scene.motion())
        state, first, frames = initialize(
            scene_source(scene), config, tracker, ThresholdFloodSegmenter()
        )
        results = [first]
        frames = list(frames)
        for frame in frames[:9]:
            results.append(process_frame(state, frame))
        mask = add_instance(
            state, PromptBundle(instance_id=1, positive_points=(Point(100.5, 24.5),))
        )
        assert iou(mask, scene.gt_masks(9).masks[1]) >= 0.99
        for frame in frames[9:]:
            results.append(process_frame(state, frame))
        for r in results[11:]:
            assert r.masks.instance_ids == (0, 1)
            assert iou(r.masks.masks[1], scene.gt_masks(r.frame_index).masks[1]) >= 0.99
            assert iou(r.masks.masks[0], scene.gt_masks(r.frame_index).masks[0]) >= 0.99

    def test_background_click_leaves_state_unchanged(self):
        scene = self.two_disk_scene()
        config = PipelineConfig(
            init_mode="points",
            init_points={0: (Point(30.5, 48.5),)},
            min_visible_points=1,
        )
        tracker = OracleTracker(scene.motion())
        state, first, frames = initialize(
            scene_source(scene), config, tracker, ThresholdFloodSegmenter()
        )
        with pytest.raises(EmptyRegionError):
            add_instance(
                state,
                PromptBundle(instance_id=1, positive_points=(Point(70.5, 80.5),)),
            )
        assert state.active_instance_ids() == [0]
        result = process_frame(state, next(iter(frames)))
        assert result.masks.instance_ids == (0,)

    def test_duplicate_instance_rejected(self):
        scene = self.two_disk_scene()
        config = PipelineConfig(
            init_mode="points",
            init_points={0: (Point(30.5, 48.5),)},
            min_visible_points=1,
        )
        state, first, frames = initialize(
            scene_source(scene),
            config,
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        with pytest.raises(InvalidArgumentError):
            add_instance(
                state,
                PromptBundle(instance_id=0, positive_points=(Point(30.5, 48.5),)),
            )

    def test_add_with_restart_fallback(self):
        class NoMidstream(OracleTracker):
            capabilities = TrackerCapabilities(supports_midstream_queries=False)

        scene = self.two_disk_scene()
        config = PipelineConfig(
            strategy=SamplingStrategy("kmedoids", 5, seed=1),
            init_mode="points",
            init_points={0: (Point(30.5, 48.5),)},
            min_visible_points=1,
        )
        tracker = NoMidstream(scene.motion())
        state, first, frames = initialize(
            scene_source(scene), config, tracker, ThresholdFloodSegmenter()
        )
        frames = list(frames)
        for frame in frames[:5]:
            process_frame(state, frame)
        add_instance(
            state, PromptBundle(instance_id=1, positive_points=(Point(100.5, 24.5),))
        )
        result = process_frame(state, frames[5])
        assert result.masks.instance_ids == (0, 1)
        assert iou(result.masks.masks[1], scene.gt_masks(6).masks[1]) >= 0.99


class TestDeterminismAndStreaming:
    def make_results(self, scene, frame_count=None):
        frames = [scene.frame(t) for t in range(frame_count or scene.spec.frame_count)]
        return list(
            iter_run(
                ArraySource(frames),
                text_config(),
                OracleTracker(scene.motion()),
                ThresholdFloodSegmenter(),
            )
        )

    def test_identical_runs_serialize_identically(self):
        scene = moving_disk_scene(frame_count=20)
        assert serialized(self.make_results(scene)) == serialized(
            self.make_results(scene)
        )

    def test_prefix_run_agrees_with_full_run(self):
        scene = moving_disk_scene(frame_count=30)
        full = self.make_results(scene)
        prefix = self.make_results(scene, frame_count=12)
        assert serialized(full[:12]) == serialized(prefix)

    def test_slow_sink_sees_every_frame_offline(self):
        scene = moving_disk_scene(frame_count=15)
        seen = []

        def slow_sink(result):
            time.sleep(0.002)
            seen.append(result.frame_index)

        summary = run(
            scene_source(scene),
            text_config(),
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
            sink=slow_sink,
        )
        assert seen == list(range(15))
        assert summary.dropped_frames == 0


class TestRunSummary:
    def test_summary_contents(self):
        scene = moving_disk_scene(frame_count=25)
        summary = run(
            scene_source(scene),
            text_config(),
            OracleTracker(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        assert summary.frame_count == 25
        assert summary.instance_ids == (0,)
        for stage in ("track", "segment", "total"):
            stats = summary.latency_ms[stage]
            assert stats["p50"] <= stats["p90"] <= stats["p99"]

    def test_partial_summary_on_backend_error(self):
        scene = moving_disk_scene(frame_count=20)

        class DiesAtSeven(OracleTracker):
            def step(self, frame):
                if frame.index == 7:
                    raise RuntimeError("sensor unplugged")
                return super().step(frame)

        summary = run(
            scene_source(scene),
            text_config(),
            DiesAtSeven(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        assert summary.error is not None
        assert "sensor unplugged" in summary.error
        assert summary.frame_count == 7  # frames 0..6 completed
        assert summary.latency_ms  # partial percentiles still reported

    def test_backend_error_carries_frame_index(self):
        scene = moving_disk_scene(frame_count=10)

        class Dies(OracleTracker):
            def step(self, frame):
                raise RuntimeError("no")

        state, first, frames = initialize(
            scene_source(scene),
            text_config(),
            Dies(scene.motion()),
            ThresholdFloodSegmenter(),
        )
        with pytest.raises(TrackerBackendError) as err:
            process_frame(state, next(iter(frames)))
        assert err.value.frame_index == 1
