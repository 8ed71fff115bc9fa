"""Accuracy metrics, dataset ingestion, and the efficiency bench.

Metrics are pure mask arithmetic; `evaluate_run` aligns a result stream with
ground truth strictly by frame index and matches instances greedily by IoU.
`bench_latency` times the track+segment path only — frames are decoded up
front — and always dumps the raw per-frame samples so every reported number
can be re-derived.
"""

from __future__ import annotations

import csv
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import BinaryMask, Frame, InstanceMaskSet
from .errors import (
    AlignmentError,
    CapabilityError,
    InsufficientDataError,
    InvalidArgumentError,
    ManifestError,
    NotFoundError,
)
from .maskio import load_mask_file
from .pipeline import FrameResult
from .stats import nearest_rank_percentile
from .video import ImageDirectorySource

_FRAME_STEM = re.compile(r"^frame_(\d{6})\.png$")

GT_KINDS = ("instance", "binary")


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    if pred.bits.shape != gt.bits.shape:
        raise InvalidArgumentError(
            f"mask shapes differ: {pred.bits.shape} vs {gt.bits.shape}"
        )
    inter = int(np.logical_and(pred.bits, gt.bits).sum())
    union = int(np.logical_or(pred.bits, gt.bits).sum())
    if union == 0:
        return 1.0
    return inter / union


def dice(pred: BinaryMask, gt: BinaryMask) -> float:
    if pred.bits.shape != gt.bits.shape:
        raise InvalidArgumentError(
            f"mask shapes differ: {pred.bits.shape} vs {gt.bits.shape}"
        )
    inter = int(np.logical_and(pred.bits, gt.bits).sum())
    total = int(pred.bits.sum()) + int(gt.bits.sum())
    if total == 0:
        return 1.0
    return 2.0 * inter / total


@dataclass(frozen=True)
class MetricRecord:
    frame_index: int
    instance: int | str
    iou: float
    dice: float


@dataclass(frozen=True)
class RunScores:
    records: tuple[MetricRecord, ...]
    mean_iou: float
    mean_dice: float
    frame_count: int


def greedy_match(
    pred: Mapping[int, BinaryMask], gt: Mapping[int, BinaryMask]
) -> list[tuple[int, int, float]]:
    """Pair predictions with ground-truth instances, best IoU first.

    Each side is used at most once; pairs come out in decreasing IoU order
    with (pred id, gt id) as the tie-break.
    """
    candidates = []
    for pid, pmask in sorted(pred.items()):
        for gid, gmask in sorted(gt.items()):
            candidates.append((iou(pmask, gmask), pid, gid))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    matched: list[tuple[int, int, float]] = []
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    for score, pid, gid in candidates:
        if pid in used_pred or gid in used_gt:
            continue
        matched.append((pid, gid, score))
        used_pred.add(pid)
        used_gt.add(gid)
    return matched


def _union_mask(masks: InstanceMaskSet, dims: tuple[int, int]) -> BinaryMask:
    merged = np.zeros(dims, dtype=bool)
    for mask in masks.masks.values():
        merged |= mask.bits
    return BinaryMask.from_bits(merged)


def _frame_records(
    result: FrameResult, gt: InstanceMaskSet, gt_kind: str
) -> list[MetricRecord]:
    pred = result.masks.masks
    dims = None
    for source in (result.masks, gt):
        if source.dims is not None:
            dims = source.dims
            break
    if dims is None:
        return []
    if gt_kind == "binary":
        merged_gt = _union_mask(gt, dims)
        merged_pred = _union_mask(result.masks, dims)
        return [
            MetricRecord(
                frame_index=result.frame_index,
                instance="binary",
                iou=iou(merged_pred, merged_gt),
                dice=dice(merged_pred, merged_gt),
            )
        ]
    records = []
    pairs = greedy_match(pred, gt.masks)
    matched_pred = {pid for pid, _, _ in pairs}
    matched_gt = {gid for _, gid, _ in pairs}
    for pid, gid, score in pairs:
        records.append(
            MetricRecord(
                frame_index=result.frame_index,
                instance=pid,
                iou=score,
                dice=dice(pred[pid], gt.masks[gid]),
            )
        )
    # Either side left unmatched counts as a miss, not a skip.
    for pid in sorted(set(pred) - matched_pred):
        if pred[pid].is_empty:
            continue
        records.append(MetricRecord(result.frame_index, pid, 0.0, 0.0))
    for gid in sorted(set(gt.masks) - matched_gt):
        if gt.masks[gid].is_empty:
            continue
        records.append(MetricRecord(result.frame_index, f"gt:{gid}", 0.0, 0.0))
    return records


def evaluate_run(
    results: Sequence[FrameResult],
    gt_frames: Mapping[int, InstanceMaskSet],
    gt_kind: str = "instance",
) -> RunScores:
    """Score a result stream against ground truth, frame-aligned by index.

    Per-frame scores average the frame's instance records; the summary
    averages frames. A frame where both sides agree nothing is present
    scores 1.0.
    """
    if gt_kind not in GT_KINDS:
        raise InvalidArgumentError(
            f"unknown gt kind {gt_kind!r}, expected one of {GT_KINDS}"
        )
    missing = [r.frame_index for r in results if r.frame_index not in gt_frames]
    if missing:
        raise AlignmentError(
            f"no ground truth for frame indices {missing}", indices=tuple(missing)
        )
    all_records: list[MetricRecord] = []
    frame_ious: list[float] = []
    frame_dices: list[float] = []
    for result in results:
        records = _frame_records(result, gt_frames[result.frame_index], gt_kind)
        all_records.extend(records)
        if records:
            frame_ious.append(float(np.mean([r.iou for r in records])))
            frame_dices.append(float(np.mean([r.dice for r in records])))
        else:
            frame_ious.append(1.0)
            frame_dices.append(1.0)
    if not results:
        raise InsufficientDataError("no frames to evaluate")
    return RunScores(
        records=tuple(all_records),
        mean_iou=float(np.mean(frame_ious)),
        mean_dice=float(np.mean(frame_dices)),
        frame_count=len(results),
    )


@dataclass(frozen=True)
class LatencyStats:
    device_label: str
    samples_ms: tuple[float, ...]
    csv_path: str

    @property
    def summary(self) -> dict[str, float]:
        return {
            "p50": nearest_rank_percentile(self.samples_ms, 0.50),
            "p90": nearest_rank_percentile(self.samples_ms, 0.90),
            "p99": nearest_rank_percentile(self.samples_ms, 0.99),
            "mean": float(np.mean(self.samples_ms)),
        }


def bench_latency(
    session_factory: Callable[[], Callable[[Frame], object]],
    frames: Sequence[Frame],
    csv_path: str | Path,
    warmup: int = 20,
    measured: int = 200,
    device_label: str = "cpu",
) -> LatencyStats:
    """Wall-clock per frame for the track+segment path.

    The factory builds a fresh session and returns its per-frame step
    callable; the first `warmup` frames are timed but discarded (lazy-init
    spikes land there). Raw measured samples always go to `csv_path`.
    """
    if measured < 1 or warmup < 0:
        raise InvalidArgumentError("warmup must be >= 0 and measured >= 1")
    needed = warmup + measured
    if len(frames) < needed:
        raise InsufficientDataError(
            f"need {needed} frames ({warmup} warmup + {measured} measured), "
            f"got {len(frames)}"
        )
    step = session_factory()
    samples: list[float] = []
    for offset, frame in enumerate(frames[:needed]):
        begin = time.perf_counter()
        step(frame)
        elapsed_ms = (time.perf_counter() - begin) * 1000.0
        if offset >= warmup:
            samples.append(elapsed_ms)
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_offset", "latency_ms"])
        for offset, value in enumerate(samples):
            writer.writerow([warmup + offset, f"{value:.6f}"])
    return LatencyStats(
        device_label=device_label,
        samples_ms=tuple(samples),
        csv_path=str(path),
    )


@dataclass(frozen=True)
class BenchReport:
    method: str
    dataset: str
    # Accuracy means are optional: a pure latency bench has none to report.
    mean_iou: float | None
    mean_dice: float | None
    latency_ms: Mapping[str, Mapping[str, float]]
    peak_inference_memory_gb: float
    memory_provenance: str = "peak_rss"
    learnable_params_m: float | None = None

    def __post_init__(self) -> None:
        for label, stats in self.latency_ms.items():
            if not stats["p50"] <= stats["p90"] <= stats["p99"]:
                raise InvalidArgumentError(
                    f"percentiles for {label!r} are not monotone"
                )


def peak_rss_gb() -> float:
    """Peak resident set of this process, in GiB (ru_maxrss is KiB on Linux)."""
    import resource

    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / (1024.0**2)


def count_learnable_params(model, freeze: Mapping[str, bool] | None = None) -> float:
    """Parameters in non-frozen groups, in millions rounded to one decimal."""
    groups_fn = getattr(model, "parameter_groups", None)
    if groups_fn is None:
        raise CapabilityError(
            f"{type(model).__name__} does not expose parameter groups"
        )
    freeze = dict(freeze or {})
    total = 0
    for group, params in groups_fn().items():
        if freeze.get(group, False):
            continue
        total += sum(int(np.asarray(arr).size) for arr in params.values())
    return round(total / 1e6, 1)


@dataclass(frozen=True)
class EvalDataset:
    """Aligned frame/mask file pairs plus how to decode the masks."""

    root: str
    frames_dir: str
    masks_dir: str
    mask_encoding: str
    pairs: tuple[tuple[int, str, str], ...]

    def video_source(self, fps: float = 25.0) -> ImageDirectorySource:
        return ImageDirectorySource(Path(self.root) / self.frames_dir, fps=fps)

    def load_gt(self) -> dict[int, InstanceMaskSet]:
        return {
            index: load_mask_file(mask_path, self.mask_encoding, frame_index=index)
            for index, _, mask_path in self.pairs
        }


def ingest_dataset(
    root: str | Path,
    frames_dir: str = "frames",
    masks_dir: str = "masks",
    mask_encoding: str = "palette",
) -> EvalDataset:
    """Pair every frame with its identically-named mask file.

    Both directories must contain the same frame_NNNNNN.png stems; an
    unmatched file on either side is reported by path.
    """
    base = Path(root)
    frames_path = base / frames_dir
    masks_path = base / masks_dir
    for required in (frames_path, masks_path):
        if not required.is_dir():
            raise NotFoundError(f"dataset directory missing: {required}")

    def indexed(directory: Path) -> dict[int, Path]:
        out = {}
        for entry in sorted(directory.iterdir()):
            match = _FRAME_STEM.match(entry.name)
            if match:
                out[int(match.group(1))] = entry
        return out

    frame_files = indexed(frames_path)
    mask_files = indexed(masks_path)
    if not frame_files:
        raise ManifestError(f"no frames found under {frames_path}")
    orphan_frames = sorted(set(frame_files) - set(mask_files))
    orphan_masks = sorted(set(mask_files) - set(frame_files))
    if orphan_frames or orphan_masks:
        paths = [str(frame_files[i]) for i in orphan_frames]
        paths += [str(mask_files[i]) for i in orphan_masks]
        raise ManifestError(
            "unpaired dataset entries: "
            + ", ".join(
                [f"frame {i} has no mask" for i in orphan_frames]
                + [f"mask {i} has no frame" for i in orphan_masks]
            ),
            paths=tuple(paths),
        )
    pairs = tuple(
        (index, str(frame_files[index]), str(mask_files[index]))
        for index in sorted(frame_files)
    )
    return EvalDataset(
        root=str(base),
        frames_dir=frames_dir,
        masks_dir=masks_dir,
        mask_encoding=mask_encoding,
        pairs=pairs,
    )


def format_report_table(reports: Sequence[BenchReport]) -> str:
    """Aligned text table, one row per (report, device label)."""
    headers = [
        "method",
        "dataset",
        "iou",
        "dice",
        "device",
        "p50_ms",
        "p90_ms",
        "p99_ms",
        "mem_gb",
        "params_m",
    ]
    rows = []
    for report in reports:
        for label, stats in report.latency_ms.items():
            rows.append(
                [
                    report.method,
                    report.dataset,
                    "-" if report.mean_iou is None else f"{report.mean_iou:.3f}",
                    "-" if report.mean_dice is None else f"{report.mean_dice:.3f}",
                    label,
                    f"{stats['p50']:.2f}",
                    f"{stats['p90']:.2f}",
                    f"{stats['p99']:.2f}",
                    f"{report.peak_inference_memory_gb:.2f}",
                    "-"
                    if report.learnable_params_m is None
                    else f"{report.learnable_params_m:.1f}",
                ]
            )
    widths = [
        max(len(headers[col]), *(len(row[col]) for row in rows)) if rows else len(headers[col])
        for col in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)


def report_payload(report: BenchReport) -> dict:
    """JSON-ready view of a bench report."""
    return {
        "method": report.method,
        "dataset": report.dataset,
        "mean_iou": report.mean_iou,
        "mean_dice": report.mean_dice,
        "latency_ms": {k: dict(v) for k, v in report.latency_ms.items()},
        "peak_inference_memory_gb": report.peak_inference_memory_gb,
        "memory_provenance": report.memory_provenance,
        "learnable_params_m": report.learnable_params_m,
    }
