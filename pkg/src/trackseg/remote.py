"""Out-of-process adapters over newline-delimited JSON on a local socket.

One connection carries one session: each line is a request object and each
reply is a single line. Frames travel as base64 RGB bytes; masks come back
as run-length counts. Servers instantiate a fresh backend adapter per
connection, so concurrent sessions never share tracker state.
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from contextlib import contextmanager
from typing import Callable

import numpy as np

from .core import (
    BinaryMask,
    Frame,
    frame_from_payload,
    frame_payload,
    mask_to_rle,
    rle_to_mask,
)
from .errors import InvalidArgumentError
from .segmenters import AdapterPrompt, SegmenterAdapter
from .trackers import TrackerAdapter, TrackerCapabilities

_CONNECT_TIMEOUT_S = 10.0
_IO_TIMEOUT_S = 60.0


class _LineChannel:
    """Blocking request/reply over one socket, one JSON object per line."""

    def __init__(self, host: str, port: int):
        self._sock = socket.create_connection((host, port), timeout=_CONNECT_TIMEOUT_S)
        self._sock.settimeout(_IO_TIMEOUT_S)
        self._file = self._sock.makefile("rwb")

    def request(self, message: dict) -> dict | list:
        self._file.write(json.dumps(message).encode() + b"\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ConnectionError("server closed the connection")
        reply = json.loads(line)
        if isinstance(reply, dict) and "error" in reply:
            raise RuntimeError(f"remote backend: {reply['error']}")
        return reply

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()


class SocketTrackerAdapter(TrackerAdapter):
    """Tracker whose backend lives behind a local TCP endpoint."""

    name = "socket"
    capabilities = TrackerCapabilities()

    def __init__(self, host: str, port: int):
        self._channel = _LineChannel(host, port)

    def start(self, frame, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self._channel.request(
            {"op": "init", "frame": frame_payload(frame), "points": pts.tolist()}
        )

    def add_points(self, frame, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self._channel.request(
            {"op": "add", "frame": frame_payload(frame), "points": pts.tolist()}
        )

    def step(self, frame):
        reply = self._channel.request(
            {"op": "step", "frame": frame_payload(frame)}
        )
        positions = np.asarray(reply["points"], dtype=np.float64).reshape(-1, 2)
        visible = np.asarray(reply["visible"], dtype=bool)
        return positions, visible

    def close(self):
        self._channel.close()


class SocketSegmenterAdapter(SegmenterAdapter):
    """Segmenter behind a local TCP endpoint.

    The wire protocol has no capability handshake, so the caller declares
    which prompt modes the far side honors.
    """

    name = "socket"

    def __init__(
        self,
        host: str,
        port: int,
        prompt_modes: frozenset[str] = frozenset({"points", "box"}),
        native_input_hw: tuple[int, int] | None = None,
    ):
        self.prompt_modes = frozenset(prompt_modes)
        self.native_input_hw = native_input_hw
        self._channel = _LineChannel(host, port)

    def predict(self, pixels: np.ndarray, prompts: list[AdapterPrompt]):
        frame = Frame(
            index=0,
            timestamp_ms=0.0,
            height=pixels.shape[0],
            width=pixels.shape[1],
            pixels=np.ascontiguousarray(pixels, dtype=np.uint8),
        )
        wire_prompts = []
        for prompt in prompts:
            wire_prompts.append(
                {
                    "points": None
                    if prompt.points is None
                    else np.asarray(prompt.points, dtype=np.float64).tolist(),
                    "box": None if prompt.box is None else list(prompt.box),
                    "text": prompt.text,
                }
            )
        reply = self._channel.request(
            {
                "op": "predict",
                "frame": frame_payload(frame),
                "prompts": wire_prompts,
            }
        )
        maps = []
        for entry in reply:
            mask = rle_to_mask(entry["rle"], entry["height"], entry["width"])
            maps.append(mask.bits.astype(np.float64))
        return maps

    def close(self):
        self._channel.close()


def _serve(handler_cls, host: str, port: int):
    server = socketserver.ThreadingTCPServer((host, port), handler_cls)
    server.daemon_threads = True
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def _reply(wfile, payload) -> None:
    wfile.write(json.dumps(payload).encode() + b"\n")
    wfile.flush()


def serve_tracker(
    adapter_factory: Callable[[], TrackerAdapter],
    host: str = "127.0.0.1",
    port: int = 0,
):
    """Expose tracker backends; each connection drives its own instance."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            adapter = adapter_factory()
            try:
                for line in self.rfile:
                    try:
                        message = json.loads(line)
                        op = message["op"]
                        frame = frame_from_payload(message["frame"])
                        if op == "init":
                            pts = np.asarray(message["points"], dtype=np.float64)
                            adapter.start(frame, pts.reshape(-1, 2))
                            _reply(self.wfile, {"points": [], "visible": []})
                        elif op == "add":
                            pts = np.asarray(message["points"], dtype=np.float64)
                            adapter.add_points(frame, pts.reshape(-1, 2))
                            _reply(self.wfile, {"points": [], "visible": []})
                        elif op == "step":
                            positions, visible = adapter.step(frame)
                            _reply(
                                self.wfile,
                                {
                                    "points": np.asarray(positions).tolist(),
                                    "visible": [bool(v) for v in visible],
                                },
                            )
                        else:
                            raise InvalidArgumentError(f"unknown op {op!r}")
                    except Exception as exc:  # surfaced client-side per request
                        _reply(self.wfile, {"error": str(exc)})
            finally:
                adapter.close()

    return _serve(Handler, host, port)


def serve_segmenter(
    adapter_factory: Callable[[], SegmenterAdapter],
    host: str = "127.0.0.1",
    port: int = 0,
):
    """Expose segmenter backends; one instance per connection."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            adapter = adapter_factory()
            try:
                for line in self.rfile:
                    try:
                        message = json.loads(line)
                        if message["op"] != "predict":
                            raise InvalidArgumentError(
                                f"unknown op {message['op']!r}"
                            )
                        frame = frame_from_payload(message["frame"])
                        prompts = []
                        for entry in message["prompts"]:
                            points = entry.get("points")
                            prompts.append(
                                AdapterPrompt(
                                    points=None
                                    if points is None
                                    else np.asarray(points, dtype=np.float64),
                                    box=None
                                    if entry.get("box") is None
                                    else tuple(entry["box"]),
                                    text=entry.get("text"),
                                )
                            )
                        maps = adapter.predict(frame.pixels, prompts)
                        payload = []
                        for prob in maps:
                            # The wire carries RLE only; binarize at the same
                            # 0.5 the consumer applies, so nothing changes.
                            bits = np.asarray(prob) >= 0.5
                            payload.append(
                                {
                                    "rle": mask_to_rle(BinaryMask.from_bits(bits)),
                                    "height": int(bits.shape[0]),
                                    "width": int(bits.shape[1]),
                                }
                            )
                        _reply(self.wfile, payload)
                    except Exception as exc:
                        _reply(self.wfile, {"error": str(exc)})
            finally:
                adapter.close()

    return _serve(Handler, host, port)


@contextmanager
def tracker_service(adapter_factory: Callable[[], TrackerAdapter]):
    """Context-managed tracker endpoint; yields the bound port."""
    server, thread = serve_tracker(adapter_factory)
    try:
        yield server.server_address[1]
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5.0)


@contextmanager
def segmenter_service(adapter_factory: Callable[[], SegmenterAdapter]):
    """Context-managed segmenter endpoint; yields the bound port."""
    server, thread = serve_segmenter(adapter_factory)
    try:
        yield server.server_address[1]
    finally:
        server.shutdown()
        server.server_close()
        thread.join(timeout=5.0)
