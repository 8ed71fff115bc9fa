"""Ordered frame suppliers: in-memory lists, numbered image directories,
container files (needs opencv), and a thread-fed live queue.
"""

from __future__ import annotations

import re
import threading
from collections import deque
from pathlib import Path
from typing import Iterator, Protocol, Sequence, runtime_checkable

import numpy as np
from PIL import Image

from .core import Frame
from .errors import CapabilityError, InvalidArgumentError, NotFoundError

_FRAME_FILE = re.compile(r"^frame_(\d{6})\.png$")


@runtime_checkable
class VideoSource(Protocol):
    def __iter__(self) -> Iterator[Frame]: ...


class ArraySource:
    """Wraps an in-memory frame sequence."""

    def __init__(self, frames: Sequence[Frame]):
        self._frames = list(frames)

    def __len__(self) -> int:
        return len(self._frames)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self._frames)


class ImageDirectorySource:
    """Reads frame_000000.png, frame_000001.png, ... from one directory.

    Frame index comes from the filename, timestamps from the configured fps.
    """

    def __init__(self, directory: str | Path, fps: float = 25.0):
        if fps <= 0:
            raise InvalidArgumentError(f"fps must be positive, got {fps}")
        self.directory = Path(directory)
        self.fps = fps
        if not self.directory.is_dir():
            raise NotFoundError(f"frame directory {self.directory} does not exist")
        entries = []
        for child in self.directory.iterdir():
            m = _FRAME_FILE.match(child.name)
            if m:
                entries.append((int(m.group(1)), child))
        if not entries:
            raise NotFoundError(
                f"no frame_%06d.png files found in {self.directory}"
            )
        self._entries = sorted(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[Frame]:
        for index, path in self._entries:
            pixels = np.asarray(Image.open(path).convert("RGB"))
            yield Frame.from_pixels(index, pixels, index * 1000.0 / self.fps)


class VideoFileSource:
    """Decodes a container file (mp4 etc.) frame by frame via opencv."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            raise NotFoundError(f"video file {self.path} does not exist")

    def __iter__(self) -> Iterator[Frame]:
        try:
            import cv2
        except ImportError as exc:
            raise CapabilityError(
                "container decoding needs opencv; install the [video] extra"
            ) from exc
        capture = cv2.VideoCapture(str(self.path))
        if not capture.isOpened():
            raise InvalidArgumentError(f"could not open video file {self.path}")
        fps = capture.get(cv2.CAP_PROP_FPS) or 25.0
        index = 0
        try:
            while True:
                ok, bgr = capture.read()
                if not ok:
                    break
                yield Frame.from_pixels(
                    index, bgr[:, :, ::-1].copy(), index * 1000.0 / fps
                )
                index += 1
        finally:
            capture.release()


class LiveQueueSource:
    """Thread-fed source for live streams.

    With newest_wins (the default), a consumer that falls behind skips
    straight to the most recent frame and `dropped` counts what was skipped;
    without it the queue is a plain FIFO. Iteration ends after close().
    """

    def __init__(self, newest_wins: bool = True):
        self.newest_wins = newest_wins
        self.dropped = 0
        self._cond = threading.Condition()
        self._queue: deque[Frame] = deque()
        self._closed = False

    def push(self, frame: Frame) -> None:
        with self._cond:
            if self._closed:
                raise InvalidArgumentError("source is closed")
            if self.newest_wins and self._queue:
                self.dropped += len(self._queue)
                self._queue.clear()
            self._queue.append(frame)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def __iter__(self) -> Iterator[Frame]:
        while True:
            with self._cond:
                while not self._queue and not self._closed:
                    self._cond.wait()
                if not self._queue:
                    return
                frame = self._queue.popleft()
            yield frame


def open_video(path: str | Path, fps: float = 25.0) -> VideoSource:
    """Directory -> image sequence; file -> container decode."""
    p = Path(path)
    if p.is_dir():
        return ImageDirectorySource(p, fps=fps)
    return VideoFileSource(p)
