"""Experiment configuration: one TOML or JSON document, six sections.

Every section is optional and every key has a default, so an empty document
is a valid experiment. Command-line flags arrive as dotted overrides
("pipeline.init_mode") and win over file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli

from .core import BoxPrompt, Point
from .errors import ConfigError, NotFoundError
from .finetune import TrainConfig
from .pipeline import PipelineConfig
from .sampling import STRATEGY_KINDS, SamplingStrategy

TRACKER_KINDS = ("oracle", "ncc", "socket", "sleep_stub")
SEGMENTER_KINDS = ("threshold_flood", "socket", "sleep_stub")


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    options: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "options", dict(self.options))


@dataclass(frozen=True)
class BenchConfig:
    warmup: int = 20
    measured: int = 200
    device_label: str = "cpu"
    method: str = "trackseg"
    dataset: str = "synthetic"

    def __post_init__(self) -> None:
        if self.warmup < 0:
            raise ConfigError("bench.warmup", "must be >= 0")
        if self.measured < 1:
            raise ConfigError("bench.measured", "must be >= 1")


@dataclass(frozen=True)
class AppConfig:
    sampling: SamplingStrategy
    tracker: AdapterSpec
    segmenter: AdapterSpec
    pipeline: PipelineConfig
    train: TrainConfig
    bench: BenchConfig


_SCHEMA: dict[str, dict[str, Any]] = {
    "sampling": {
        "kind": "kmedoids",
        "points_per_instance": 5,
        "seed": 0,
        "manual_points": {},
    },
    "tracker": {"kind": "ncc", "options": {}},
    "segmenter": {"kind": "threshold_flood", "options": {}},
    "pipeline": {
        "init_mode": "text",
        "init_text": "surgical tool",
        "init_boxes": [],
        "init_points": {},
        "init_mask_path": None,
        "init_mask_encoding": "palette",
        "min_visible_points": 2,
        "reinit_patience_frames": 3,
        "window_size": 4,
    },
    "train": {
        "epochs": 50,
        "batch_size": 32,
        "lr_init": 1e-5,
        "input_hw": [1024, 1024],
        "points_per_prompt": 5,
        "freeze": {
            "prompt_encoder": True,
            "image_encoder": False,
            "mask_decoder": False,
        },
        "resample_prompts": True,
        "seed": 0,
    },
    "bench": {
        "warmup": 20,
        "measured": 200,
        "device_label": "cpu",
        "method": "trackseg",
        "dataset": "synthetic",
    },
}


def config_schema() -> dict:
    """Section -> {key -> default}; what --print-schema emits."""
    return json.loads(json.dumps(_SCHEMA))


def _read_document(path: str | Path) -> dict:
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"config file not found: {p}")
    if p.suffix == ".toml":
        with open(p, "rb") as fh:
            try:
                return tomli.load(fh)
            except tomli.TOMLDecodeError as err:
                raise ConfigError(str(p), f"invalid TOML: {err}") from err
    if p.suffix == ".json":
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(str(p), f"invalid JSON: {err}") from err
    raise ConfigError(str(p), "config must be a .toml or .json file")


def _check_unknown(document: Mapping[str, Any]) -> None:
    for section, body in document.items():
        if section not in _SCHEMA:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, Mapping):
            raise ConfigError(section, "section must be a table")
        for key in body:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")


def _apply_overrides(merged: dict, overrides: Mapping[str, Any]) -> None:
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ConfigError(dotted, "unknown override")
        merged[section][key] = value


def _points_map(raw: Mapping[str, Any], where: str) -> dict[int, tuple[Point, ...]]:
    out: dict[int, tuple[Point, ...]] = {}
    for key, entries in raw.items():
        try:
            instance_id = int(key)
        except (TypeError, ValueError):
            raise ConfigError(where, f"instance id {key!r} is not an integer")
        points = []
        for entry in entries:
            if len(entry) != 2:
                raise ConfigError(where, f"point {entry!r} is not [x, y]")
            points.append(Point(float(entry[0]), float(entry[1])))
        out[instance_id] = tuple(points)
    return out


def _build(merged: dict) -> AppConfig:
    s = merged["sampling"]
    try:
        sampling = SamplingStrategy(
            kind=s["kind"],
            points_per_instance=int(s["points_per_instance"]),
            seed=int(s["seed"]),
            manual_points=_points_map(s["manual_points"], "sampling.manual_points")
            or None,
        )
    except ConfigError:
        raise
    except Exception as err:
        raise ConfigError("sampling", str(err)) from err

    t = merged["tracker"]
    if t["kind"] not in TRACKER_KINDS:
        raise ConfigError(
            "tracker.kind", f"unknown kind {t['kind']!r}, expected {TRACKER_KINDS}"
        )
    tracker = AdapterSpec(kind=t["kind"], options=dict(t["options"]))

    g = merged["segmenter"]
    if g["kind"] not in SEGMENTER_KINDS:
        raise ConfigError(
            "segmenter.kind",
            f"unknown kind {g['kind']!r}, expected {SEGMENTER_KINDS}",
        )
    segmenter = AdapterSpec(kind=g["kind"], options=dict(g["options"]))

    p = merged["pipeline"]
    boxes = []
    for entry in p["init_boxes"]:
        if len(entry) != 4:
            raise ConfigError(
                "pipeline.init_boxes", f"box {entry!r} is not [x0, y0, x1, y1]"
            )
        boxes.append(BoxPrompt(*map(float, entry)))
    init_points = _points_map(p["init_points"], "pipeline.init_points")
    try:
        pipeline = PipelineConfig(
            strategy=sampling,
            init_mode=p["init_mode"],
            init_text=p["init_text"],
            init_boxes=tuple(boxes),
            init_points=init_points or None,
            init_mask_path=p["init_mask_path"],
            init_mask_encoding=p["init_mask_encoding"],
            min_visible_points=int(p["min_visible_points"]),
            reinit_patience_frames=int(p["reinit_patience_frames"]),
            window_size=int(p["window_size"]),
        )
    except Exception as err:
        raise ConfigError("pipeline", str(err)) from err

    tr = merged["train"]
    try:
        train = TrainConfig(
            epochs=int(tr["epochs"]),
            batch_size=int(tr["batch_size"]),
            lr_init=float(tr["lr_init"]),
            input_hw=tuple(int(v) for v in tr["input_hw"]),
            points_per_prompt=int(tr["points_per_prompt"]),
            freeze=dict(tr["freeze"]),
            resample_prompts=bool(tr["resample_prompts"]),
            seed=int(tr["seed"]),
        )
    except Exception as err:
        raise ConfigError("train", str(err)) from err

    b = merged["bench"]
    bench = BenchConfig(
        warmup=int(b["warmup"]),
        measured=int(b["measured"]),
        device_label=str(b["device_label"]),
        method=str(b["method"]),
        dataset=str(b["dataset"]),
    )
    return AppConfig(
        sampling=sampling,
        tracker=tracker,
        segmenter=segmenter,
        pipeline=pipeline,
        train=train,
        bench=bench,
    )


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, Any] | None = None
) -> AppConfig:
    """Read a config document (or pure defaults) and apply overrides."""
    document = _read_document(path) if path is not None else {}
    return config_from_mapping(document, overrides)


def config_from_mapping(
    document: Mapping[str, Any], overrides: Mapping[str, Any] | None = None
) -> AppConfig:
    """Build an AppConfig from an already-parsed document (e.g. a JSON body)."""
    _check_unknown(document)
    merged = {
        section: {**defaults, **dict(document.get(section, {}))}
        for section, defaults in _SCHEMA.items()
    }
    if overrides:
        _apply_overrides(merged, overrides)
    if merged["sampling"]["kind"] not in STRATEGY_KINDS:
        raise ConfigError(
            "sampling.kind",
            f"unknown kind {merged['sampling']['kind']!r}, "
            f"expected {STRATEGY_KINDS}",
        )
    return _build(merged)
