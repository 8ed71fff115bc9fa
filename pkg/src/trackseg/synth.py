"""Synthetic scenes with analytic ground truth.

Scenes render bright textured disks moving over a dark textured background,
optionally hidden behind rectangular occluders for scheduled frame windows.
Because every quantity (position, visibility, mask) is analytic, scenes
serve as exact oracles for tracker, segmenter, and pipeline tests.

Disk texture lives in 150..255 and background in 0..100, so the default
reference segmenter threshold (128) separates them exactly. Occluders are
drawn at a dull value below the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .core import BinaryMask, Frame, InstanceMaskSet, Point
from .errors import InvalidArgumentError

_BACKGROUND_HIGH = 100
_DISK_LOW, _DISK_HIGH = 150, 255
_OCCLUDER_VALUE = 60


@dataclass(frozen=True)
class DiskSpec:
    """One moving disk: center (x, y) at frame 0, per-frame velocity (vx, vy)."""

    center: tuple[float, float]
    radius: float
    velocity: tuple[float, float] = (0.0, 0.0)
    texture_seed: int = 0


@dataclass(frozen=True)
class OccluderSpec:
    """Dull rectangle drawn over the scene for frames start <= t < end."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    start_frame: int
    end_frame: int


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frame_count: int
    disks: tuple[DiskSpec, ...] = ()
    occluders: tuple[OccluderSpec, ...] = ()
    background_seed: int = 0
    fps: float = 25.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frame_count < 1:
            raise InvalidArgumentError("scene dimensions and frame count must be positive")
        object.__setattr__(self, "disks", tuple(self.disks))
        object.__setattr__(self, "occluders", tuple(self.occluders))


def scene_spec_to_json(spec: SceneSpec) -> str:
    return json.dumps({"scene": asdict(spec)}, indent=2)


def scene_spec_from_json(text: str) -> SceneSpec:
    raw = json.loads(text)["scene"]
    disks = tuple(
        DiskSpec(
            center=tuple(d["center"]),
            radius=d["radius"],
            velocity=tuple(d.get("velocity", (0.0, 0.0))),
            texture_seed=d.get("texture_seed", 0),
        )
        for d in raw.get("disks", [])
    )
    occluders = tuple(OccluderSpec(**o) for o in raw.get("occluders", []))
    return SceneSpec(
        height=raw["height"],
        width=raw["width"],
        frame_count=raw["frame_count"],
        disks=disks,
        occluders=occluders,
        background_seed=raw.get("background_seed", 0),
        fps=raw.get("fps", 25.0),
    )


def _disk_bits(height: int, width: int, cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= radius**2


class Scene:
    """Renders a SceneSpec and answers analytic queries about it."""

    def __init__(self, spec: SceneSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.background_seed)
        self._background = rng.integers(0, _BACKGROUND_HIGH + 1, (spec.height, spec.width)).astype(
            np.uint8
        )
        self._textures = []
        for disk in spec.disks:
            side = 2 * math.ceil(disk.radius) + 3
            trng = np.random.default_rng(disk.texture_seed)
            self._textures.append(trng.integers(_DISK_LOW, _DISK_HIGH + 1, (side, side)).astype(np.uint8))

    # -- analytic queries ---------------------------------------------------

    def disk_center(self, disk_index: int, t: int) -> tuple[float, float]:
        d = self.spec.disks[disk_index]
        return (d.center[0] + d.velocity[0] * t, d.center[1] + d.velocity[1] * t)

    def active_occluders(self, t: int) -> list[OccluderSpec]:
        return [o for o in self.spec.occluders if o.start_frame <= t < o.end_frame]

    def owning_disk(self, p: Point, t: int) -> int | None:
        """Index of the disk whose area contains p at frame t (topmost = last drawn)."""
        for i in reversed(range(len(self.spec.disks))):
            cx, cy = self.disk_center(i, t)
            if (p.x - cx) ** 2 + (p.y - cy) ** 2 <= self.spec.disks[i].radius ** 2:
                return i
        return None

    def point_occluded(self, x: float, y: float, t: int) -> bool:
        return any(
            o.x_min <= x < o.x_max and o.y_min <= y < o.y_max for o in self.active_occluders(t)
        )

    def gt_masks(self, t: int) -> InstanceMaskSet:
        """Per-instance visible area: the disk raster minus active occluders."""
        h, w = self.spec.height, self.spec.width
        occ = np.zeros((h, w), bool)
        for o in self.active_occluders(t):
            r0, r1 = max(0, math.floor(o.y_min)), min(h, math.ceil(o.y_max))
            c0, c1 = max(0, math.floor(o.x_min)), min(w, math.ceil(o.x_max))
            occ[r0:r1, c0:c1] = True
        masks = {}
        for i in range(len(self.spec.disks)):
            cx, cy = self.disk_center(i, t)
            bits = _disk_bits(h, w, cx, cy, self.spec.disks[i].radius) & ~occ
            masks[i] = BinaryMask.from_bits(bits)
        return InstanceMaskSet(frame_index=t, masks=masks)

    # -- rendering ----------------------------------------------------------

    def frame(self, t: int) -> Frame:
        if not 0 <= t < self.spec.frame_count:
            raise InvalidArgumentError(f"frame {t} outside scene range [0, {self.spec.frame_count})")
        h, w = self.spec.height, self.spec.width
        gray = self._background.copy()
        for i, disk in enumerate(self.spec.disks):
            cx, cy = self.disk_center(i, t)
            bits = _disk_bits(h, w, cx, cy, disk.radius)
            rows, cols = np.nonzero(bits)
            if rows.size == 0:
                continue
            # Texture indexed relative to the disk anchor so integer motion
            # translates the appearance rigidly.
            tex = self._textures[i]
            margin = math.ceil(disk.radius) + 1
            tr = rows - math.floor(cy) + margin
            tc = cols - math.floor(cx) + margin
            gray[rows, cols] = tex[tr % tex.shape[0], tc % tex.shape[1]]
        for o in self.active_occluders(t):
            r0, r1 = max(0, math.floor(o.y_min)), min(h, math.ceil(o.y_max))
            c0, c1 = max(0, math.floor(o.x_min)), min(w, math.ceil(o.x_max))
            gray[r0:r1, c0:c1] = _OCCLUDER_VALUE
        pixels = np.repeat(gray[:, :, None], 3, axis=2)
        return Frame(
            index=t,
            timestamp_ms=t * 1000.0 / self.spec.fps,
            height=h,
            width=w,
            pixels=pixels,
        )

    def frames(self) -> Iterator[Frame]:
        for t in range(self.spec.frame_count):
            yield self.frame(t)

    def motion(self) -> "SceneMotion":
        return SceneMotion(self)


class SceneSource:
    """Video-source view of a scene; frames render lazily on each pass."""

    def __init__(self, scene: Scene):
        self.scene = scene

    def __len__(self) -> int:
        return self.scene.spec.frame_count

    def __iter__(self) -> Iterator[Frame]:
        return self.scene.frames()


class SceneMotion:
    """Analytic motion field: where a point born at (p, t0) sits at frame t, and
    whether it is visible there (inside bounds and not under an occluder)."""

    def __init__(self, scene: Scene):
        self._scene = scene

    def locate(self, birth: Point, birth_frame: int, t: int) -> tuple[float, float, bool]:
        scene = self._scene
        disk = scene.owning_disk(birth, birth_frame)
        if disk is None:
            x, y = birth.x, birth.y
        else:
            vx, vy = scene.spec.disks[disk].velocity
            x = birth.x + vx * (t - birth_frame)
            y = birth.y + vy * (t - birth_frame)
        h, w = scene.spec.height, scene.spec.width
        visible = 0.0 <= x < w and 0.0 <= y < h and not scene.point_occluded(x, y, t)
        return x, y, visible


def translating_texture_frames(
    height: int,
    width: int,
    frame_count: int,
    velocity: tuple[int, int],
    seed: int = 0,
) -> list[Frame]:
    """Full-frame texture rigidly rolling at an integer per-frame velocity.

    Wrap-around keeps appearance rigid everywhere, which makes the sequence a
    clean fixture for tracker drift measurements: a point at (x, y) in frame 0
    sits at (x + vx*t, y + vy*t) in frame t (modulo leaving the view).
    """
    vx, vy = velocity
    if vx != int(vx) or vy != int(vy):
        raise InvalidArgumentError("translating texture requires integer velocity")
    rng = np.random.default_rng(seed)
    tex = rng.integers(0, 256, (height, width)).astype(np.uint8)
    frames = []
    for t in range(frame_count):
        rolled = np.roll(tex, shift=(int(vy) * t, int(vx) * t), axis=(0, 1))
        frames.append(Frame.from_pixels(t, np.repeat(rolled[:, :, None], 3, axis=2), t * 40.0))
    return frames
