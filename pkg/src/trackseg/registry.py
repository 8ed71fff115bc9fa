"""Build tracker/segmenter adapters from configuration specs."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

from .config import AdapterSpec
from .errors import ConfigError, NotFoundError
from .remote import SocketSegmenterAdapter, SocketTrackerAdapter
from .segmenters import SegmenterAdapter, ThresholdFloodSegmenter
from .stubs import SleepSegmenter, SleepTracker
from .synth import Scene, SceneSource, scene_spec_from_json
from .trackers import NccBlockTracker, OracleTracker, TrackerAdapter
from .video import VideoSource, open_video


def _known(options: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(options) - allowed
    if unknown:
        raise ConfigError(
            f"{where}.{sorted(unknown)[0]}", "unknown adapter option"
        )


def _port(options: Mapping[str, Any], where: str) -> int:
    if "port" not in options:
        raise ConfigError(f"{where}.port", "socket adapters require a port")
    return int(options["port"])


def make_tracker(spec: AdapterSpec, scene: Scene | None = None) -> TrackerAdapter:
    """Instantiate the tracker a config names.

    The oracle tracker replays analytic motion and therefore only exists for
    synthetic scene videos; passing it without a scene is a config error.
    """
    options = dict(spec.options)
    if spec.kind == "oracle":
        _known(options, set(), "tracker.options")
        if scene is None:
            raise ConfigError(
                "tracker.kind",
                "oracle tracker requires a synthetic scene video (.json)",
            )
        return OracleTracker(scene.motion())
    if spec.kind == "ncc":
        _known(
            options,
            {"patch_radius", "search_radius", "min_corr"},
            "tracker.options",
        )
        return NccBlockTracker(
            patch_radius=int(options.get("patch_radius", 10)),
            search_radius=int(options.get("search_radius", 16)),
            min_corr=float(options.get("min_corr", 0.5)),
        )
    if spec.kind == "socket":
        _known(options, {"host", "port"}, "tracker.options")
        return SocketTrackerAdapter(
            host=str(options.get("host", "127.0.0.1")),
            port=_port(options, "tracker.options"),
        )
    if spec.kind == "sleep_stub":
        _known(options, {"step_ms", "init_extra_ms"}, "tracker.options")
        return SleepTracker(
            step_ms=float(options.get("step_ms", 5.0)),
            init_extra_ms=float(options.get("init_extra_ms", 0.0)),
        )
    raise ConfigError("tracker.kind", f"unknown kind {spec.kind!r}")


def make_segmenter(spec: AdapterSpec) -> SegmenterAdapter:
    options = dict(spec.options)
    if spec.kind == "threshold_flood":
        _known(
            options, {"intensity_threshold", "native_input_hw"}, "segmenter.options"
        )
        native = options.get("native_input_hw")
        return ThresholdFloodSegmenter(
            intensity_threshold=float(options.get("intensity_threshold", 128.0)),
            native_input_hw=None if native is None else tuple(int(v) for v in native),
        )
    if spec.kind == "socket":
        _known(
            options,
            {"host", "port", "prompt_modes", "native_input_hw"},
            "segmenter.options",
        )
        native = options.get("native_input_hw")
        return SocketSegmenterAdapter(
            host=str(options.get("host", "127.0.0.1")),
            port=_port(options, "segmenter.options"),
            prompt_modes=frozenset(options.get("prompt_modes", ("points", "box"))),
            native_input_hw=None if native is None else tuple(int(v) for v in native),
        )
    if spec.kind == "sleep_stub":
        _known(options, {"segment_ms", "radius"}, "segmenter.options")
        return SleepSegmenter(
            segment_ms=float(options.get("segment_ms", 0.0)),
            radius=float(options.get("radius", 10.0)),
        )
    raise ConfigError("segmenter.kind", f"unknown kind {spec.kind!r}")


def open_source(path: str | Path, fps: float = 25.0) -> tuple[VideoSource, Scene | None]:
    """Resolve a video argument to a source.

    A .json file is a synthetic scene description (which also unlocks the
    oracle tracker); a directory is a frame-image sequence; anything else is
    decoded as a video container.
    """
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"video not found: {p}")
    if p.suffix == ".json":
        scene = Scene(scene_spec_from_json(p.read_text()))
        return SceneSource(scene), scene
    return open_video(p, fps=fps), None
