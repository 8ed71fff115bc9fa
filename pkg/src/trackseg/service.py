"""Session-based streaming service over the pipeline.

A session binds one video source to one tracker/segmenter pair and runs a
single pipeline worker. Clients create sessions, submit prompts, steer
playback with control verbs, and consume an ordered stream of frame events;
prompts and control are applied between frames, never mid-frame.

`SessionManager` is framework-free (plain threads and conditions) so it can
be driven directly; `create_app` wraps it in the HTTP + WebSocket surface.
All events carry a schema version ("v": 1).
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from contextlib import asynccontextmanager
from dataclasses import replace
from typing import Any, Iterator, Mapping

from fastapi import Body, FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.concurrency import run_in_threadpool

from . import __version__
from .config import AppConfig, config_from_mapping
from .core import BoxPrompt, Frame, Point, frame_from_payload
from .errors import (
    ConfigError,
    EmptyRegionError,
    InvalidArgumentError,
    NotFoundError,
    StateError,
    TracksegError,
)
from .pipeline import (
    FrameResult,
    PipelineConfig,
    PipelineState,
    add_instance,
    frame_result_record,
    initialize,
    process_frame,
)
from .registry import make_segmenter, make_tracker, open_source
from .segmenters import PromptBundle
from .synth import Scene, SceneSource, scene_spec_from_json
from .video import LiveQueueSource, VideoSource

EVENT_VERSION = 1

AWAITING = "awaiting_prompt"
RUNNING = "running"
PAUSED = "paused"
FINISHED = "finished"
FAILED = "failed"

_TERMINAL = (FINISHED, FAILED)
_CONTROL_TIMEOUT_S = 10.0


def _open_descriptor(
    source: Mapping[str, Any],
) -> tuple[VideoSource, Scene | None, LiveQueueSource | None]:
    kind = source.get("kind")
    if kind == "scene":
        if "spec" in source:
            scene = Scene(scene_spec_from_json(json.dumps({"scene": source["spec"]})))
            return SceneSource(scene), scene, None
        if "path" in source:
            video, scene = open_source(source["path"])
            if scene is None:
                raise InvalidArgumentError(
                    f"source path {source['path']!r} is not a scene description"
                )
            return video, scene, None
        raise InvalidArgumentError("scene source requires 'spec' or 'path'")
    if kind in ("directory", "video"):
        if "path" not in source:
            raise InvalidArgumentError(f"{kind} source requires a path")
        video, scene = open_source(source["path"], fps=float(source.get("fps", 25.0)))
        return video, scene, None
    if kind == "live":
        live = LiveQueueSource(newest_wins=bool(source.get("newest_wins", True)))
        return live, None, live
    raise InvalidArgumentError(
        f"unknown source kind {kind!r}, expected scene|directory|video|live"
    )


def _parse_prompt_entries(payload: Mapping[str, Any]) -> list[dict]:
    entries = payload.get("prompts")
    if not isinstance(entries, (list, tuple)) or not entries:
        raise InvalidArgumentError("payload requires a non-empty 'prompts' list")
    parsed = []
    for entry in entries:
        if not isinstance(entry, Mapping):
            raise InvalidArgumentError(f"prompt {entry!r} is not an object")
        points = None
        if entry.get("points") is not None:
            pts = []
            for item in entry["points"]:
                if len(item) != 2:
                    raise InvalidArgumentError(f"point {item!r} is not [x, y]")
                pts.append(Point(float(item[0]), float(item[1])))
            points = tuple(pts)
        box = None
        if entry.get("box") is not None:
            if len(entry["box"]) != 4:
                raise InvalidArgumentError(
                    f"box {entry['box']!r} is not [x_min, y_min, x_max, y_max]"
                )
            box = BoxPrompt(*map(float, entry["box"]))
        text = entry.get("text")
        if points is None and box is None and text is None:
            raise InvalidArgumentError("prompt carries no points, box, or text")
        parsed.append(
            {
                "instance_id": entry.get("instance_id"),
                "points": points,
                "box": box,
                "text": text,
            }
        )
    return parsed


class _Session:
    def __init__(
        self,
        session_id: str,
        config: AppConfig,
        video: VideoSource,
        scene: Scene | None,
        live: LiveQueueSource | None,
    ):
        self.id = session_id
        self.config = config
        self.video = video
        self.scene = scene
        self.live = live
        self.tracker = make_tracker(config.tracker, scene)
        self.segmenter = make_segmenter(config.segmenter)

        self.lock = threading.Lock()
        self.events_cond = threading.Condition(self.lock)
        self.control_cond = threading.Condition(self.lock)
        # Serializes frame processing against mid-run prompt application.
        self.pipeline_lock = threading.Lock()

        self.state = AWAITING
        self.events: list[dict] = []
        self.cursor = -1
        self.error: str | None = None
        self.pause_requested = False
        self.stop_requested = False
        self.processing = False
        self.pipe: PipelineState | None = None
        self.frames: Iterator[Frame] | None = None
        self.worker: threading.Thread | None = None

    # -- event plumbing ---------------------------------------------------

    def _frame_event(self, result: FrameResult) -> dict:
        record = frame_result_record(result)
        record["v"] = EVENT_VERSION
        record["type"] = "frame"
        record["dropped_count"] = int(getattr(self.video, "dropped", 0))
        return record

    def _append(self, event: dict) -> None:
        with self.lock:
            self.events.append(event)
            self.cursor = max(self.cursor, int(event["frame_index"]))
            self.events_cond.notify_all()

    def _set_state(self, new_state: str) -> None:
        """Callers hold self.lock; transitions are validated at the API edge."""
        self.state = new_state
        self.events_cond.notify_all()
        self.control_cond.notify_all()

    # -- lifecycle ----------------------------------------------------------

    def start(self, pipeline_config: PipelineConfig) -> FrameResult:
        """Initialize on the first frame, emit event 0, launch the worker."""
        state, first, frames = initialize(
            self.video, pipeline_config, self.tracker, self.segmenter
        )
        with self.lock:
            self.pipe = state
            self.frames = frames
            self._set_state(RUNNING)
        self._append(self._frame_event(first))
        self.worker = threading.Thread(
            target=self._run, name=f"session-{self.id}", daemon=True
        )
        self.worker.start()
        return first

    def start_async(self, pipeline_config: PipelineConfig) -> None:
        """Initialization that may block on a live feed runs off-thread; a
        failure there surfaces as an error event rather than an HTTP error."""

        def boot() -> None:
            try:
                self.start(pipeline_config)
            except Exception as exc:
                self._fail(0, exc)

        threading.Thread(
            target=boot, name=f"session-{self.id}-init", daemon=True
        ).start()

    def _fail(self, frame_index: int, exc: Exception) -> None:
        with self.lock:
            self.error = str(exc)
            self.events.append(
                {
                    "v": EVENT_VERSION,
                    "type": "error",
                    "frame_index": int(frame_index),
                    "message": str(exc),
                }
            )
            self.cursor = max(self.cursor, int(frame_index))
            self._set_state(FAILED)

    def _boundary(self) -> bool:
        """Apply control verbs between frames; False means stop."""
        with self.lock:
            while True:
                if self.stop_requested:
                    return False
                if self.pause_requested:
                    if self.state == RUNNING:
                        self._set_state(PAUSED)
                    self.control_cond.wait()
                    continue
                if self.state == PAUSED:
                    self._set_state(RUNNING)
                self.processing = True
                return True

    def _run(self) -> None:
        assert self.frames is not None and self.pipe is not None
        try:
            for frame in self.frames:
                if not self._boundary():
                    break
                try:
                    with self.pipeline_lock:
                        result = process_frame(self.pipe, frame)
                except Exception as exc:
                    self._fail(frame.index, exc)
                    return
                finally:
                    with self.lock:
                        self.processing = False
                        self.control_cond.notify_all()
                self._append(self._frame_event(result))
        except Exception as exc:
            # The source itself failed (decode error, closed feed).
            self._fail(self.cursor + 1, exc)
            return
        with self.lock:
            if self.state != FAILED:
                self._set_state(FINISHED)

    def await_state(self, targets: tuple[str, ...]) -> str:
        """Callers hold self.lock."""
        deadline = time.monotonic() + _CONTROL_TIMEOUT_S
        while self.state not in targets:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self.control_cond.wait(remaining)
        return self.state

    # -- prompts --------------------------------------------------------

    def _init_config_for(self, prompts: list[dict]) -> PipelineConfig:
        kinds = {
            "points" if p["points"] else "box" if p["box"] else "text"
            for p in prompts
        }
        if len(kinds) != 1:
            raise InvalidArgumentError(
                "initial prompts must all be points, all boxes, or one text"
            )
        kind = kinds.pop()
        base = self.config.pipeline
        if kind == "points":
            init_points: dict[int, tuple[Point, ...]] = {}
            for i, p in enumerate(prompts):
                iid = int(p["instance_id"]) if p["instance_id"] is not None else i
                if iid in init_points:
                    raise InvalidArgumentError(f"duplicate instance id {iid}")
                init_points[iid] = p["points"]
            return replace(base, init_mode="points", init_points=init_points)
        if kind == "box":
            return replace(
                base, init_mode="box", init_boxes=tuple(p["box"] for p in prompts)
            )
        if len(prompts) != 1:
            raise InvalidArgumentError("text initialization takes exactly one prompt")
        return replace(base, init_mode="text", init_text=prompts[0]["text"])

    def _next_instance_id(self, taken: set[int]) -> int:
        assert self.pipe is not None
        used = set(self.pipe.session.active_instance_ids())
        used.update(self.pipe.last_nonempty_mask)
        used.update(taken)
        return max(used, default=-1) + 1

    def submit(self, payload: Mapping[str, Any]) -> dict:
        prompts = _parse_prompt_entries(payload)
        # pipeline_lock also serializes concurrent submissions, so two
        # initial-prompt posts cannot both initialize.
        with self.pipeline_lock:
            with self.lock:
                state = self.state
            if state == AWAITING:
                first = self.start(self._init_config_for(prompts))
                return {
                    "instance_ids": list(first.masks.instance_ids),
                    "state": RUNNING,
                    "frame_index": first.frame_index,
                }
            if state != RUNNING:
                raise StateError(f"cannot submit prompts to a {state} session")
            assert self.pipe is not None
            added: list[int] = []
            for p in prompts:
                iid = (
                    int(p["instance_id"])
                    if p["instance_id"] is not None
                    else self._next_instance_id(set(added))
                )
                bundle = PromptBundle(
                    instance_id=iid,
                    positive_points=p["points"] or (),
                    box=p["box"],
                    text=p["text"],
                )
                add_instance(self.pipe, bundle)
                added.append(iid)
            frame_index = self.pipe.current_frame.index
        return {"instance_ids": added, "state": RUNNING, "frame_index": frame_index}


class SessionManager:
    """Owns all live sessions; every method is thread-safe."""

    def __init__(self) -> None:
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    def _get(self, session_id: str) -> _Session:
        with self._lock:
            session = self._sessions.get(session_id)
        if session is None:
            raise NotFoundError(f"unknown session {session_id!r}")
        return session

    def create_session(
        self,
        config_document: Mapping[str, Any],
        source: Mapping[str, Any],
        overrides: Mapping[str, Any] | None = None,
    ) -> dict:
        config = config_from_mapping(config_document or {}, overrides)
        video, scene, live = _open_descriptor(source)
        session = _Session(uuid.uuid4().hex, config, video, scene, live)
        pipeline_config = config.pipeline
        auto_start = pipeline_config.init_mode != "points" or bool(
            pipeline_config.init_points
        )
        if auto_start:
            if live is None:
                session.start(pipeline_config)
            else:
                session.start_async(pipeline_config)
        with self._lock:
            self._sessions[session.id] = session
        return self.describe(session.id)

    def describe(self, session_id: str) -> dict:
        session = self._get(session_id)
        with session.lock:
            instance_ids = (
                sorted(session.pipe.session.active_instance_ids())
                if session.pipe is not None
                else []
            )
            return {
                "session_id": session.id,
                "state": session.state,
                "frame_cursor": session.cursor,
                "instance_ids": instance_ids,
                "event_count": len(session.events),
                "dropped_count": int(getattr(session.video, "dropped", 0)),
                "error": session.error,
            }

    def submit_prompt(self, session_id: str, payload: Mapping[str, Any]) -> dict:
        return self._get(session_id).submit(payload)

    def control(self, session_id: str, verb: str) -> dict:
        session = self._get(session_id)
        with session.lock:
            if verb == "pause":
                if session.state != RUNNING:
                    raise StateError(f"cannot pause a {session.state} session")
                session.pause_requested = True
                session.control_cond.notify_all()
                if session.processing:
                    session.await_state((PAUSED,) + _TERMINAL)
                else:
                    # The worker is idle between frames (e.g. a dry live
                    # feed), so the pause takes effect right here.
                    session._set_state(PAUSED)
            elif verb == "resume":
                if session.state != PAUSED:
                    raise StateError(f"cannot resume a {session.state} session")
                session.pause_requested = False
                # Paused implies the worker is parked between frames, so the
                # transition back is immediate.
                session._set_state(RUNNING)
            elif verb == "stop":
                if session.state not in (RUNNING, PAUSED):
                    raise StateError(f"cannot stop a {session.state} session")
                session.stop_requested = True
                session.pause_requested = False
                session.control_cond.notify_all()
                if session.live is not None:
                    session.live.close()
                session.await_state(_TERMINAL)
            else:
                raise InvalidArgumentError(f"unknown control verb {verb!r}")
        return self.describe(session_id)

    def push_frame(self, session_id: str, payload: Mapping[str, Any]) -> dict:
        session = self._get(session_id)
        if session.live is None:
            raise InvalidArgumentError("session source is not a live feed")
        session.live.push(frame_from_payload(payload))
        return {"dropped_count": session.live.dropped}

    def end_stream(self, session_id: str) -> dict:
        session = self._get(session_id)
        if session.live is None:
            raise InvalidArgumentError("session source is not a live feed")
        session.live.close()
        return {"dropped_count": session.live.dropped}

    def collect_events(
        self, session_id: str, after: int, timeout: float
    ) -> tuple[list[dict], bool]:
        """Events with frame_index > after; True once the session is terminal
        and fully drained."""
        session = self._get(session_id)
        deadline = time.monotonic() + timeout
        with session.lock:
            while True:
                batch = [e for e in session.events if e["frame_index"] > after]
                if batch:
                    return batch, False
                if session.state in _TERMINAL:
                    return [], True
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return [], False
                session.events_cond.wait(remaining)

    def iter_events(self, session_id: str, after: int = -1) -> Iterator[dict]:
        """Blocking generator over a session's events from `after` onward."""
        cursor = after
        while True:
            batch, done = self.collect_events(session_id, cursor, timeout=0.5)
            for event in batch:
                cursor = max(cursor, int(event["frame_index"]))
                yield event
            if done:
                return

    def shutdown(self) -> None:
        """Stop every active session at the next frame boundary."""
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            try:
                self.control(session.id, "stop")
            except (StateError, NotFoundError):
                pass
            if session.worker is not None:
                session.worker.join(timeout=5.0)


def _error_payload(exc: TracksegError) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
    return payload


def _status_for(exc: TracksegError) -> int:
    if isinstance(exc, NotFoundError):
        return 404
    if isinstance(exc, StateError):
        return 409
    if isinstance(exc, EmptyRegionError):
        return 422
    return 400


def create_app(manager: SessionManager | None = None) -> FastAPI:
    mgr = manager if manager is not None else SessionManager()

    @asynccontextmanager
    async def lifespan(app):
        yield
        mgr.shutdown()

    app = FastAPI(title="trackseg", version=__version__, lifespan=lifespan)
    app.state.manager = mgr

    def guarded(fn, *args):
        try:
            return fn(*args)
        except TracksegError as exc:
            raise HTTPException(_status_for(exc), detail=_error_payload(exc)) from exc

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/sessions", status_code=201)
    def create_session(payload: dict = Body(...)) -> dict:
        source = payload.get("source")
        if not isinstance(source, Mapping):
            raise HTTPException(
                400,
                detail={
                    "error": "InvalidArgumentError",
                    "message": "body requires a 'source' object",
                },
            )
        return guarded(
            mgr.create_session,
            payload.get("config") or {},
            source,
            payload.get("overrides"),
        )

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str) -> dict:
        return guarded(mgr.describe, session_id)

    @app.post("/sessions/{session_id}/prompts")
    def submit_prompt(session_id: str, payload: dict = Body(...)) -> dict:
        return guarded(mgr.submit_prompt, session_id, payload)

    @app.post("/sessions/{session_id}/control")
    def control(session_id: str, payload: dict = Body(...)) -> dict:
        return guarded(mgr.control, session_id, str(payload.get("verb")))

    @app.post("/sessions/{session_id}/frames", status_code=202)
    def push_frame(session_id: str, payload: dict = Body(...)) -> dict:
        if payload.get("end"):
            return guarded(mgr.end_stream, session_id)
        return guarded(mgr.push_frame, session_id, payload)

    @app.websocket("/sessions/{session_id}/events")
    async def events(websocket: WebSocket, session_id: str, after: int = -1):
        await websocket.accept()
        try:
            mgr.describe(session_id)
        except NotFoundError as exc:
            await websocket.send_json(
                {"v": EVENT_VERSION, "type": "error", "message": str(exc)}
            )
            await websocket.close(code=4404)
            return
        cursor = after
        try:
            while True:
                batch, done = await run_in_threadpool(
                    mgr.collect_events, session_id, cursor, 0.25
                )
                for event in batch:
                    await websocket.send_json(event)
                    cursor = max(cursor, int(event["frame_index"]))
                if done:
                    await websocket.send_json(
                        {
                            "v": EVENT_VERSION,
                            "type": "end",
                            "state": mgr.describe(session_id)["state"],
                        }
                    )
                    await websocket.close()
                    return
        except WebSocketDisconnect:
            return

    return app
