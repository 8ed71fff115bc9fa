"""Command-line entry points: run, eval, bench, finetune, serve.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
command takes one config document (TOML or JSON) plus flag overrides, and
--seed pins both sampling and training randomness for reproducible outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import socket
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from . import __version__
from .config import AppConfig, config_schema, load_config
from .core import Frame, InstanceMaskSet, mask_from_payload
from .errors import (
    ConfigError,
    InvalidArgumentError,
    NotFoundError,
    TracksegError,
)
from .evalbench import (
    BenchReport,
    bench_latency,
    evaluate_run,
    format_report_table,
    ingest_dataset,
    peak_rss_gb,
    report_payload,
)
from .finetune import ToyPromptNet, load_checkpoint, samples_from_manifest, train
from .pipeline import FrameResult, frame_result_record, initialize, process_frame, run
from .registry import make_segmenter, make_tracker, open_source
from .video import ArraySource

_USAGE_ERRORS = (ConfigError, NotFoundError, InvalidArgumentError)

# One stable color per instance id for overlay rendering.
_PALETTE = (
    (31, 119, 180),
    (255, 127, 14),
    (44, 160, 44),
    (214, 39, 40),
    (148, 103, 189),
    (140, 86, 75),
    (227, 119, 194),
    (188, 189, 34),
    (23, 190, 207),
)


@dataclass(frozen=True)
class RunManifest:
    """Provenance record for one run; written atomically before frame 0 and
    never rewritten (the end timestamp lands in the summary artifact)."""

    config: dict
    seed: int
    adapter_versions: dict
    start_timestamp: str
    out_dir: str


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_json_atomic(payload: Mapping, path: Path) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _config_snapshot(config: AppConfig) -> dict:
    return json.loads(json.dumps(asdict(config), default=str))


def _adapter_versions(tracker, segmenter) -> dict:
    return {
        "tracker": {
            "name": tracker.name,
            "version": str(getattr(tracker, "version", __version__)),
        },
        "segmenter": {
            "name": getattr(segmenter, "name", type(segmenter).__name__),
            "version": str(getattr(segmenter, "version", __version__)),
        },
    }


def _collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise InvalidArgumentError(f"--set expects key=value, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    if getattr(args, "strategy", None):
        overrides["sampling.kind"] = args.strategy
    if getattr(args, "points", None) is not None:
        overrides["sampling.points_per_instance"] = args.points
    if getattr(args, "seed", None) is not None:
        overrides["sampling.seed"] = args.seed
        overrides["train.seed"] = args.seed
    return overrides


def _load(args: argparse.Namespace) -> AppConfig:
    return load_config(getattr(args, "config", None), _collect_overrides(args))


class _TeeSource:
    """Pass-through video source remembering the frame most recently yielded,
    so the run sink can paint overlays (results carry masks, not pixels)."""

    def __init__(self, video):
        self._video = video
        self.last: Frame | None = None

    def __iter__(self) -> Iterator[Frame]:
        for frame in self._video:
            self.last = frame
            yield frame


def _write_overlay(frame: Frame, result: FrameResult, path: Path) -> None:
    from PIL import Image

    canvas = frame.pixels.astype(np.float64)
    for iid in result.masks.instance_ids:
        mask = result.masks.masks[iid]
        if mask.is_empty:
            continue
        color = np.array(_PALETTE[iid % len(_PALETTE)], dtype=np.float64)
        sel = mask.bits
        canvas[sel] = 0.55 * canvas[sel] + 0.45 * color
    out = np.clip(canvas, 0, 255).astype(np.uint8)
    for tracked in result.tracked:
        for point, visible in zip(tracked.points, tracked.visible):
            r, c = int(point.y), int(point.x)
            if 0 <= r < frame.height and 0 <= c < frame.width:
                dot = (0, 255, 0) if visible else (255, 0, 0)
                out[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2] = dot
    Image.fromarray(out).save(path)


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    video, scene = open_source(args.video)
    tracker = make_tracker(config.tracker, scene)
    segmenter = make_segmenter(config.segmenter)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    overlays_dir = out_dir / "overlays"
    if args.overlays:
        overlays_dir.mkdir(exist_ok=True)

    manifest = RunManifest(
        config=_config_snapshot(config),
        seed=config.sampling.seed,
        adapter_versions=_adapter_versions(tracker, segmenter),
        start_timestamp=_now(),
        out_dir=str(out_dir),
    )
    _write_json_atomic(asdict(manifest), out_dir / "manifest.json")

    source = _TeeSource(video) if args.overlays else video
    records_path = out_dir / "records.jsonl"
    timings_path = out_dir / "timings.csv"
    with open(records_path, "w") as records, open(timings_path, "w", newline="") as tf:
        timings = csv.writer(tf)
        timings.writerow(["frame_index", "track_ms", "segment_ms", "total_ms"])

        def sink(result: FrameResult) -> None:
            record = frame_result_record(result, include_timings=False)
            records.write(json.dumps(record, sort_keys=True) + "\n")
            timings.writerow(
                [result.frame_index]
                + [f"{result.timings_ms[k]:.6f}" for k in ("track", "segment", "total")]
            )
            if args.overlays and source.last is not None:
                _write_overlay(
                    source.last, result, overlays_dir / f"frame_{result.frame_index:06d}.png"
                )

        summary = run(source, config.pipeline, tracker, segmenter, sink=sink)

    summary_doc = {
        "frame_count": summary.frame_count,
        "instance_ids": list(summary.instance_ids),
        "latency_ms": {k: dict(v) for k, v in summary.latency_ms.items()},
        "reinit_events": [list(e) for e in summary.reinit_events],
        "dropped_frames": summary.dropped_frames,
        "error": summary.error,
        "seed": config.sampling.seed,
        "start_timestamp": manifest.start_timestamp,
        "end_timestamp": _now(),
    }
    _write_json_atomic(summary_doc, out_dir / "summary.json")

    if summary.error is not None:
        print(f"error: run aborted after {summary.frame_count} frames: {summary.error}", file=sys.stderr)
        return 1
    total = summary.latency_ms.get("total", {})
    print(
        f"processed {summary.frame_count} frames, instances {list(summary.instance_ids)}, "
        f"p50 total {total.get('p50', float('nan')):.2f} ms"
    )
    print(f"records: {records_path}")
    print(f"summary: {out_dir / 'summary.json'}")
    return 0


def _read_records(results_dir: Path) -> list[SimpleNamespace]:
    path = results_dir / "records.jsonl"
    if not path.exists():
        raise NotFoundError(f"no records.jsonl under {results_dir}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            masks = {
                int(iid): mask_from_payload(payload)
                for iid, payload in raw["instances"].items()
            }
            frame_index = int(raw["frame_index"])
        except (KeyError, ValueError, TypeError) as err:
            raise InvalidArgumentError(
                f"{path}:{lineno}: malformed record ({err})"
            ) from err
        records.append(
            SimpleNamespace(
                frame_index=frame_index,
                masks=InstanceMaskSet(frame_index=frame_index, masks=masks),
            )
        )
    return records


def cmd_eval(args: argparse.Namespace) -> int:
    results_dir = Path(args.results)
    records = _read_records(results_dir)
    dataset = ingest_dataset(args.dataset)
    gt_frames = dataset.load_gt()
    scores = evaluate_run(records, gt_frames, gt_kind=args.gt_kind)

    dataset_name = Path(dataset.root).name
    out_dir = Path(args.out) if args.out else results_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    per_frame = out_dir / "per_frame.csv"
    with open(per_frame, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "instance", "iou", "dice"])
        for record in scores.records:
            writer.writerow(
                [record.frame_index, record.instance, f"{record.iou:.6f}", f"{record.dice:.6f}"]
            )
    report = {
        "method": args.method,
        "dataset": dataset_name,
        "mean_iou": scores.mean_iou,
        "mean_dice": scores.mean_dice,
        "frame_count": scores.frame_count,
    }
    _write_json_atomic(report, out_dir / "report.json")

    header = f"{'method':<12} {'dataset':<16} {'iou':>7} {'dice':>7} {'frames':>7}"
    row = (
        f"{args.method:<12} {dataset_name:<16} "
        f"{scores.mean_iou:>7.3f} {scores.mean_dice:>7.3f} {scores.frame_count:>7d}"
    )
    print(header)
    print(row)
    print(f"per-frame metrics: {per_frame}")
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load(args)
    video, scene = open_source(args.video)
    frames = list(iter(video))
    if not frames:
        raise InvalidArgumentError("video yielded no frames")

    def session_factory():
        tracker = make_tracker(config.tracker, scene)
        segmenter = make_segmenter(config.segmenter)
        state, _, _ = initialize(ArraySource(frames), config.pipeline, tracker, segmenter)
        return lambda frame: process_frame(state, frame)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = bench_latency(
        session_factory,
        frames[1:],
        out_dir / "bench_raw.csv",
        warmup=config.bench.warmup,
        measured=config.bench.measured,
        device_label=args.device or config.bench.device_label,
    )
    report = BenchReport(
        method=config.bench.method,
        dataset=config.bench.dataset,
        mean_iou=None,
        mean_dice=None,
        latency_ms={stats.device_label: stats.summary},
        peak_inference_memory_gb=peak_rss_gb(),
    )
    _write_json_atomic(report_payload(report), out_dir / "bench.json")
    print(format_report_table([report]))
    print(f"raw latencies: {stats.csv_path}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _load(args)
    train_config = config.train
    samples = samples_from_manifest(
        args.manifest,
        input_hw=train_config.input_hw,
        points_per_prompt=train_config.points_per_prompt,
        seed=train_config.seed,
    )
    model = ToyPromptNet(seed=train_config.seed)
    if args.resume:
        model.load_state_dict(load_checkpoint(args.resume))
        print(f"resumed weights from {args.resume}")
    result = train(model, samples, train_config, args.out, run_id=args.run_id)
    losses = ", ".join(f"{loss:.4f}" for loss in result.epoch_losses)
    print(f"epoch losses: [{losses}]")
    print(f"best checkpoint: {result.best_checkpoint} (val dice {result.best_val_dice:.4f})")
    print(f"metrics: {result.metrics_path}")
    return 0


def _build_server(host: str, port: int):
    import uvicorn

    from .service import create_app

    return uvicorn.Server(
        uvicorn.Config(create_app(), host=host, port=port, log_level="warning")
    )


def _bind_address(host: str | None, port: int | None) -> tuple[str, int]:
    # Config file sections do not cover the bind address; flags beat the
    # TRACKSEG_HOST/TRACKSEG_PORT environment, which beats the defaults.
    resolved = host or os.environ.get("TRACKSEG_HOST", "127.0.0.1")
    if port is None:
        raw = os.environ.get("TRACKSEG_PORT", "8008")
        try:
            port = int(raw)
        except ValueError:
            raise InvalidArgumentError(
                f"TRACKSEG_PORT must be an integer, got {raw!r}"
            ) from None
    return resolved, port


def cmd_serve(args: argparse.Namespace) -> int:
    host, port = _bind_address(args.host, args.port)
    probe = socket.socket()
    try:
        probe.bind((host, port))
    except OSError as err:
        print(f"error: cannot bind {host}:{port}: {err}", file=sys.stderr)
        return 2
    finally:
        probe.close()
    print(f"serving on http://{host}:{port}")
    _build_server(host, port).run()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackseg",
        description="Track sparse query points and segment prompted instances per frame.",
    )
    parser.add_argument("--version", action="version", version=f"trackseg {__version__}")
    parser.add_argument(
        "--print-schema",
        action="store_true",
        help="print the config schema (sections, keys, defaults) as JSON and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="TOML or JSON experiment config")
        p.add_argument("--seed", type=int, help="pin sampling and training seeds")
        p.add_argument(
            "--set",
            action="append",
            metavar="SECTION.KEY=VALUE",
            help="override any config value (repeatable)",
        )

    p_run = sub.add_parser("run", help="offline pipeline run over a video")
    common(p_run)
    p_run.add_argument("--video", required=True, help="video file, frame directory, or scene .json")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--strategy", help="query sampling strategy override")
    p_run.add_argument("--points", type=int, help="points per instance override")
    p_run.add_argument("--overlays", action="store_true", help="write mask overlay PNGs")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="score run records against a dataset")
    p_eval.add_argument("--results", required=True, help="directory holding records.jsonl")
    p_eval.add_argument("--dataset", required=True, help="dataset root (frames/ + masks/)")
    p_eval.add_argument("--out", help="report directory (default: results dir)")
    p_eval.add_argument("--gt-kind", choices=("instance", "binary"), default="instance")
    p_eval.add_argument("--method", default="trackseg")
    p_eval.set_defaults(func=cmd_eval)

    p_bench = sub.add_parser("bench", help="latency/memory benchmark")
    common(p_bench)
    p_bench.add_argument("--video", required=True)
    p_bench.add_argument("--out", required=True)
    p_bench.add_argument("--device", help="device label for the report")
    p_bench.set_defaults(func=cmd_bench)

    p_ft = sub.add_parser("finetune", help="fit the mask head on a labeled manifest")
    common(p_ft)
    p_ft.add_argument("--manifest", required=True, help="JSONL dataset manifest")
    p_ft.add_argument("--out", required=True, help="checkpoint/metrics directory")
    p_ft.add_argument("--resume", help="checkpoint to load before training")
    p_ft.add_argument("--run-id", default="run")
    p_ft.set_defaults(func=cmd_finetune)

    p_serve = sub.add_parser("serve", help="start the streaming session service")
    common(p_serve)
    p_serve.add_argument("--host")
    p_serve.add_argument("--port", type=int)
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(json.dumps(config_schema(), indent=2, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TracksegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
