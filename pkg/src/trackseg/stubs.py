"""Constant-cost adapters for latency benchmarking and plumbing tests.

The trackers/segmenters here do no real work: they hold positions still and
stamp fixed disks around prompt points, burning a configurable amount of
wall-clock per call so benchmark numbers have a known ground truth.
"""

from __future__ import annotations

import time

import numpy as np

from .segmenters import AdapterPrompt, SegmenterAdapter
from .trackers import TrackerAdapter, TrackerCapabilities


def _burn_ms(duration_ms: float) -> None:
    if duration_ms > 0:
        time.sleep(duration_ms / 1000.0)


class SleepTracker(TrackerAdapter):
    """Holds every query at its birth position; each step costs step_ms.

    The first step after start() additionally costs init_extra_ms, imitating
    a backend with lazy one-time setup.
    """

    name = "sleep_stub"
    capabilities = TrackerCapabilities()

    def __init__(self, step_ms: float = 5.0, init_extra_ms: float = 0.0):
        self.step_ms = step_ms
        self.init_extra_ms = init_extra_ms
        self._positions = np.zeros((0, 2), dtype=np.float64)
        self._first_step_done = False

    def start(self, frame, points):
        self._positions = np.asarray(points, dtype=np.float64).reshape(-1, 2).copy()
        self._first_step_done = False

    def add_points(self, frame, points):
        added = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        self._positions = np.vstack([self._positions, added])

    def step(self, frame):
        if not self._first_step_done:
            _burn_ms(self.init_extra_ms)
            self._first_step_done = True
        _burn_ms(self.step_ms)
        n = len(self._positions)
        return self._positions.copy(), np.ones(n, dtype=bool)


class SleepSegmenter(SegmenterAdapter):
    """Stamps a fixed-radius disk around each prompt; costs segment_ms."""

    name = "sleep_stub"
    prompt_modes = frozenset({"points", "box"})

    def __init__(self, segment_ms: float = 0.0, radius: float = 10.0):
        self.segment_ms = segment_ms
        self.radius = radius

    def predict(self, pixels: np.ndarray, prompts: list[AdapterPrompt]):
        _burn_ms(self.segment_ms)
        h, w = pixels.shape[:2]
        ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
        xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
        out = []
        for prompt in prompts:
            if prompt.points is not None and len(prompt.points):
                cx, cy = prompt.points.mean(axis=0)
                inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= self.radius**2
            elif prompt.box is not None:
                x0, y0, x1, y1 = prompt.box
                inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
            else:
                inside = np.zeros((h, w), dtype=bool)
            out.append(inside.astype(np.float64))
        return out
