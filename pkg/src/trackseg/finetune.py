"""Fine-tuning harness for point-prompted mask predictors.

The harness owns the data pipeline (resize, normalization, prompt sampling,
flip augmentation), the BCE + soft-Dice objective with analytic gradients,
and an AdamW/cosine training loop. The trainable model sits behind
:class:`TrainableModel`, which tags its parameters into the three standard
groups so the freeze policy can be enforced without knowing the architecture.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .core import BinaryMask, InstanceMaskSet, Point, point_cell
from .errors import (
    ConfigError,
    EmptyRegionError,
    InvalidArgumentError,
    ManifestError,
    NotFoundError,
    StateError,
)
from .imaging import resize_image, resize_mask_nearest
from .maskio import load_mask_file
from .sampling import sample_random

logger = logging.getLogger(__name__)

MODEL_GROUPS = ("prompt_encoder", "image_encoder", "mask_decoder")
LABEL_KINDS = ("instance", "binary")

_PROB_CLAMP = 1e-7


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr_init: float = 1e-5
    input_hw: tuple[int, int] = (1024, 1024)
    points_per_prompt: int = 5
    freeze: Mapping[str, bool] = field(
        default_factory=lambda: {
            "prompt_encoder": True,
            "image_encoder": False,
            "mask_decoder": False,
        }
    )
    resample_prompts: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be positive")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be positive")
        if self.lr_init <= 0:
            raise InvalidArgumentError("lr_init must be positive")
        if len(self.input_hw) != 2 or any(d < 1 for d in self.input_hw):
            raise InvalidArgumentError("input_hw must be two positive dims")
        if self.points_per_prompt < 1:
            raise InvalidArgumentError("points_per_prompt must be positive")
        if set(self.freeze) != set(MODEL_GROUPS):
            raise InvalidArgumentError(
                f"freeze map must cover exactly {MODEL_GROUPS}"
            )
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        object.__setattr__(self, "freeze", dict(self.freeze))


@dataclass
class TrainSample:
    """One training example: a normalized image, its target region, and the
    point prompts that condition the prediction."""

    image: np.ndarray
    gt_mask: BinaryMask
    prompt_points: tuple[Point, ...]

    def __post_init__(self) -> None:
        if self.image.shape[:2] != self.gt_mask.bits.shape:
            raise InvalidArgumentError(
                f"image {self.image.shape[:2]} does not match "
                f"mask {self.gt_mask.bits.shape}"
            )
        for p in self.prompt_points:
            r, c = point_cell(p)
            if not self.gt_mask.bits[r, c]:
                raise InvalidArgumentError(
                    f"prompt point ({p.x}, {p.y}) lies outside the mask"
                )


@dataclass(frozen=True)
class LossReport:
    bce: float
    dice: float
    total: float


def normalize_image(pixels: np.ndarray, stats=None) -> np.ndarray:
    """Per-channel min-max to [0, 1], then standardization.

    A constant channel maps to zero everywhere. `stats` is an optional
    (mean, std) pair of per-channel dataset statistics; without it the
    image's own statistics are used.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    lo = arr.min(axis=(0, 1))
    hi = arr.max(axis=(0, 1))
    span = hi - lo
    unit = (arr - lo) / np.where(span > 0, span, 1.0)
    if stats is None:
        mean, std = unit.mean(axis=(0, 1)), unit.std(axis=(0, 1))
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    return (unit - mean) / np.where(std > 0, std, 1.0)


def dataset_norm_stats(images: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean/std of min-max scaled images, pooled over a split."""
    if not images:
        raise InvalidArgumentError("need at least one image for statistics")
    pooled = []
    for pixels in images:
        arr = np.asarray(pixels, dtype=np.float64)
        lo = arr.min(axis=(0, 1))
        span = arr.max(axis=(0, 1)) - lo
        pooled.append(((arr - lo) / np.where(span > 0, span, 1.0)).reshape(-1, 3))
    stacked = np.concatenate(pooled, axis=0)
    return stacked.mean(axis=0), stacked.std(axis=0)


def make_sample(
    image: np.ndarray,
    masks: InstanceMaskSet | BinaryMask,
    label_kind: str,
    seed: int,
    *,
    input_hw: tuple[int, int] = (1024, 1024),
    points_per_prompt: int = 5,
    stats=None,
) -> list[TrainSample]:
    """Build training samples from a labeled image.

    Instance labels yield one sample per instance; binary labels yield a
    single sample over the whole segmented region. Prompt points are drawn
    uniformly over the resized region so mask membership is exact at the
    training resolution. Regions that vanish after resizing are skipped
    with a warning.
    """
    if label_kind not in LABEL_KINDS:
        raise InvalidArgumentError(
            f"unknown label kind {label_kind!r}, expected one of {LABEL_KINDS}"
        )
    if isinstance(masks, BinaryMask):
        items = [(0, masks)]
    else:
        items = sorted(masks.masks.items())
    if label_kind == "binary" and len(items) > 1:
        merged = np.zeros(items[0][1].bits.shape, dtype=bool)
        for _, m in items:
            merged |= m.bits
        items = [(0, BinaryMask.from_bits(merged))]

    normalized = normalize_image(resize_image(image, input_hw), stats)
    samples: list[TrainSample] = []
    for instance_id, mask in items:
        bits = resize_mask_nearest(mask.bits, input_hw)
        if not bits.any():
            logger.warning(
                "instance %d: empty region at %s, sample skipped",
                instance_id,
                input_hw,
            )
            continue
        resized = BinaryMask.from_bits(bits)
        points = sample_random(
            resized, points_per_prompt, seed=_sub_seed(seed, instance_id)
        )
        samples.append(TrainSample(normalized, resized, tuple(points)))
    if not samples:
        raise EmptyRegionError("no non-empty regions to build samples from")
    return samples


def flip_sample(sample: TrainSample, flip_ud: bool, flip_lr: bool) -> TrainSample:
    """Apply the given flips to image, mask, and prompt points together."""
    image, bits = sample.image, sample.gt_mask.bits
    points = list(sample.prompt_points)
    h, w = bits.shape
    if flip_ud:
        image, bits = image[::-1], bits[::-1]
        points = [Point(p.x, h - p.y) for p in points]
    if flip_lr:
        image, bits = image[:, ::-1], bits[:, ::-1]
        points = [Point(w - p.x, p.y) for p in points]
    return TrainSample(
        np.ascontiguousarray(image),
        BinaryMask.from_bits(np.ascontiguousarray(bits)),
        tuple(points),
    )


def augment(sample: TrainSample, seed: int) -> TrainSample:
    """Independent 50% up-down and left-right flips."""
    rng = np.random.default_rng(seed)
    return flip_sample(sample, bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def _gt_bits(gt) -> np.ndarray:
    return gt.bits if isinstance(gt, BinaryMask) else np.asarray(gt, dtype=bool)


def loss(pred_prob: np.ndarray, gt, epsilon: float = 1.0) -> LossReport:
    """Unweighted pixel-mean BCE plus soft Dice loss."""
    pred = np.asarray(pred_prob, dtype=np.float64)
    bits = _gt_bits(gt)
    if pred.shape != bits.shape:
        raise InvalidArgumentError(
            f"prediction {pred.shape} does not match mask {bits.shape}"
        )
    # The clamp protects only the logs; Dice runs on the raw probabilities
    # so an exact match (including empty vs empty) scores exactly zero.
    p = np.clip(pred, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    g = bits.astype(np.float64)
    bce = float(np.mean(-(g * np.log(p) + (1.0 - g) * np.log1p(-p))))
    inter = float((pred * g).sum())
    mass = float(pred.sum() + g.sum())
    dice = 1.0 - (2.0 * inter + epsilon) / (mass + epsilon)
    return LossReport(bce=bce, dice=dice, total=bce + dice)


def loss_gradient(pred_prob: np.ndarray, gt, epsilon: float = 1.0) -> np.ndarray:
    """d(total)/d(pred); zero wherever the probability clamp is active."""
    pred = np.asarray(pred_prob, dtype=np.float64)
    bits = _gt_bits(gt)
    if pred.shape != bits.shape:
        raise InvalidArgumentError(
            f"prediction {pred.shape} does not match mask {bits.shape}"
        )
    p = np.clip(pred, _PROB_CLAMP, 1.0 - _PROB_CLAMP)
    g = bits.astype(np.float64)
    d_bce = (-(g / p) + (1.0 - g) / (1.0 - p)) / p.size
    inter = (pred * g).sum()
    denom = pred.sum() + g.sum() + epsilon
    d_dice = -(2.0 * g * denom - (2.0 * inter + epsilon)) / (denom * denom)
    # BCE contributes nothing where the clamp flattens it; Dice always does.
    active = (pred > _PROB_CLAMP) & (pred < 1.0 - _PROB_CLAMP)
    return np.where(active, d_bce, 0.0) + d_dice


def cosine_lr(step: int, total_steps: int, lr_init: float) -> float:
    if total_steps < 1:
        raise InvalidArgumentError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps}]")
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class AdamW:
    """AdamW with decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(
        self,
        params: Mapping[str, np.ndarray],
        grads: Mapping[str, np.ndarray],
        lr: float,
    ) -> None:
        self._t += 1
        b1, b2 = self.betas
        for name, p in params.items():
            grad = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * grad
            v *= b2
            v += (1.0 - b2) * grad * grad
            m_hat = m / (1.0 - b1**self._t)
            v_hat = v / (1.0 - b2**self._t)
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


class TrainableModel(ABC):
    """Training adapter: forward to a probability map, backward to gradients
    tagged by parameter group, and parameters exposed as live arrays."""

    @abstractmethod
    def parameter_groups(self) -> Mapping[str, dict[str, np.ndarray]]:
        """Group tag -> {parameter name -> array}. Arrays are updated in place."""

    @abstractmethod
    def forward(self, image: np.ndarray, points: Sequence[Point]) -> np.ndarray:
        """Probability map in [0, 1] with the image's spatial shape."""

    @abstractmethod
    def backward(
        self, grad_prob: np.ndarray
    ) -> Mapping[str, dict[str, np.ndarray]]:
        """Gradients for the most recent forward, mirroring parameter_groups."""

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            f"{group}.{name}": arr.copy()
            for group, params in self.parameter_groups().items()
            for name, arr in params.items()
        }

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for group, params in self.parameter_groups().items():
            for name, arr in params.items():
                arr[...] = state[f"{group}.{name}"]


class ToyPromptNet(TrainableModel):
    """Tiny differentiable scorer used for smoke runs and tests.

    logits = alpha * (image @ w + b) + beta * gain * heat, where heat is a
    Gaussian bump around the nearest prompt point. Small enough to train in
    milliseconds, yet genuinely conditioned on both pixels and prompts.
    """

    def __init__(self, seed: int = 0, sigma: float = 8.0):
        rng = np.random.default_rng(seed)
        self.sigma = sigma
        self._groups = {
            "prompt_encoder": {"gain": np.array([1.0])},
            "image_encoder": {
                "w": rng.normal(0.0, 0.1, size=3),
                "b": np.zeros(1),
            },
            "mask_decoder": {"alpha": np.array([1.0]), "beta": np.array([1.0])},
        }
        self._cache = None

    def parameter_groups(self):
        return self._groups

    def _heat(self, shape: tuple[int, int], points: Sequence[Point]) -> np.ndarray:
        h, w = shape
        ys = np.arange(h, dtype=np.float64)[:, None] + 0.5
        xs = np.arange(w, dtype=np.float64)[None, :] + 0.5
        d2 = np.full(shape, np.inf)
        for p in points:
            d2 = np.minimum(d2, (xs - p.x) ** 2 + (ys - p.y) ** 2)
        return np.exp(-d2 / (2.0 * self.sigma**2))

    def forward(self, image, points):
        g = self._groups
        score = image @ g["image_encoder"]["w"] + g["image_encoder"]["b"][0]
        heat = self._heat(score.shape, points)
        logits = (
            g["mask_decoder"]["alpha"][0] * score
            + g["mask_decoder"]["beta"][0] * g["prompt_encoder"]["gain"][0] * heat
        )
        prob = 1.0 / (1.0 + np.exp(-logits))
        self._cache = (image, score, heat, prob)
        return prob

    def backward(self, grad_prob):
        if self._cache is None:
            raise StateError("backward called before forward")
        image, score, heat, prob = self._cache
        g = self._groups
        dz = grad_prob * prob * (1.0 - prob)
        alpha = g["mask_decoder"]["alpha"][0]
        beta = g["mask_decoder"]["beta"][0]
        gain = g["prompt_encoder"]["gain"][0]
        return {
            "prompt_encoder": {"gain": np.array([(dz * beta * heat).sum()])},
            "image_encoder": {
                "w": np.einsum("ij,ijc->c", dz * alpha, image),
                "b": np.array([(dz * alpha).sum()]),
            },
            "mask_decoder": {
                "alpha": np.array([(dz * score).sum()]),
                "beta": np.array([(dz * gain * heat).sum()]),
            },
        }


@dataclass(frozen=True)
class TrainResult:
    best_checkpoint: str
    best_val_dice: float
    best_epoch: int
    epoch_losses: tuple[float, ...]
    metrics_path: str
    total_steps: int


def _mean_val_dice(model: TrainableModel, samples: Sequence[TrainSample]) -> float:
    scores = []
    for sample in samples:
        prob = model.forward(sample.image, sample.prompt_points)
        scores.append(1.0 - loss(prob, sample.gt_mask).dice)
    return float(np.mean(scores))


def _save_checkpoint(path: Path, state: Mapping[str, np.ndarray]) -> None:
    # File handle keeps np.savez from appending its own extension.
    with open(path, "wb") as fh:
        np.savez(fh, **state)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"checkpoint not found: {p}")
    with np.load(p) as data:
        return {name: data[name] for name in data.files}


def train(
    model: TrainableModel,
    samples: Sequence[TrainSample],
    config: TrainConfig,
    out_dir: str | Path,
    *,
    val_samples: Sequence[TrainSample] | None = None,
    run_id: str = "run",
) -> TrainResult:
    """AdamW + cosine-decay loop over shuffled minibatches.

    Frozen parameter groups are excluded from every optimizer step. Prompts
    are re-drawn per epoch when configured; augmentation is seeded by
    (config seed, epoch, sample index) so runs replay exactly. A checkpoint
    is written per epoch and the best-by-validation-Dice one is reported.
    """
    groups = model.parameter_groups()
    missing = set(MODEL_GROUPS) - set(groups)
    if missing:
        raise ConfigError(
            "model", f"missing parameter groups: {sorted(missing)}"
        )
    if not samples:
        raise InvalidArgumentError("training set is empty")
    validation = list(val_samples) if val_samples else list(samples)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    optimizer = AdamW()
    trainable = {
        f"{group}.{name}": arr
        for group, params in groups.items()
        if not config.freeze[group]
        for name, arr in params.items()
    }

    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    rows = []
    epoch_losses: list[float] = []
    best = (-1.0, -1, "")
    step = 0
    lr = config.lr_init
    for epoch in range(config.epochs):
        order = np.random.default_rng(
            _sub_seed(config.seed, epoch)
        ).permutation(len(samples))
        reports: list[LossReport] = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            lr = cosine_lr(step, total_steps, config.lr_init)
            acc = {name: np.zeros_like(arr) for name, arr in trainable.items()}
            for idx in batch.tolist():
                sample = samples[idx]
                if config.resample_prompts:
                    points = sample_random(
                        sample.gt_mask,
                        config.points_per_prompt,
                        seed=_sub_seed(config.seed, epoch, idx),
                    )
                    sample = TrainSample(
                        sample.image, sample.gt_mask, tuple(points)
                    )
                sample = augment(sample, _sub_seed(config.seed, epoch, idx, 1))
                prob = model.forward(sample.image, sample.prompt_points)
                reports.append(loss(prob, sample.gt_mask))
                grad_groups = model.backward(
                    loss_gradient(prob, sample.gt_mask)
                )
                for group, params in grad_groups.items():
                    if config.freeze[group]:
                        continue
                    for name, grad in params.items():
                        acc[f"{group}.{name}"] += grad
            for name in acc:
                acc[name] /= len(batch)
            optimizer.step(trainable, acc, lr)
            step += 1

        mean_total = float(np.mean([r.total for r in reports]))
        epoch_losses.append(mean_total)
        val_dice = _mean_val_dice(model, validation)
        ckpt = out / f"{run_id}-e{epoch}.ckpt"
        _save_checkpoint(ckpt, model.state_dict())
        if val_dice > best[0]:
            best = (val_dice, epoch, str(ckpt))
        rows.append(
            {
                "epoch": epoch,
                "step": step,
                "lr": lr,
                "bce": float(np.mean([r.bce for r in reports])),
                "dice": float(np.mean([r.dice for r in reports])),
                "total": mean_total,
                "val_dice": val_dice,
            }
        )

    metrics_path = out / f"{run_id}-metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "step", "lr", "bce", "dice", "total", "val_dice"]
        )
        writer.writeheader()
        writer.writerows(rows)

    return TrainResult(
        best_checkpoint=best[2],
        best_val_dice=best[0],
        best_epoch=best[1],
        epoch_losses=tuple(epoch_losses),
        metrics_path=str(metrics_path),
        total_steps=total_steps,
    )


def read_dataset_manifest(path: str | Path) -> list[dict]:
    """JSON-lines records of {image_path, mask_path, label_kind}."""
    p = Path(path)
    if not p.exists():
        raise NotFoundError(f"manifest not found: {p}")
    records = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise ManifestError(f"{p.name}:{lineno}: invalid JSON: {err}") from err
        missing = {"image_path", "mask_path", "label_kind"} - record.keys()
        if missing:
            raise ManifestError(
                f"{p.name}:{lineno}: missing keys {sorted(missing)}"
            )
        if record["label_kind"] not in LABEL_KINDS:
            raise ManifestError(
                f"{p.name}:{lineno}: unknown label_kind {record['label_kind']!r}"
            )
        records.append(record)
    if not records:
        raise ManifestError(f"{p.name}: no records")
    return records


def samples_from_manifest(
    path: str | Path,
    *,
    input_hw: tuple[int, int] = (1024, 1024),
    points_per_prompt: int = 5,
    seed: int = 0,
    stats=None,
) -> list[TrainSample]:
    """Load every manifest record into training samples.

    Paths inside the manifest resolve relative to the manifest's directory.
    Binary-labeled masks are merged into a single region before sampling.
    """
    manifest = Path(path)
    base = manifest.parent
    samples: list[TrainSample] = []
    for index, record in enumerate(read_dataset_manifest(manifest)):
        image_path = base / record["image_path"]
        if not image_path.exists():
            raise NotFoundError(f"image not found: {image_path}")
        with Image.open(image_path) as img:
            pixels = np.asarray(img.convert("RGB"))
        encoding = "binary" if record["label_kind"] == "binary" else "palette"
        masks = load_mask_file(base / record["mask_path"], encoding)
        target: InstanceMaskSet | BinaryMask = masks
        if record["label_kind"] == "binary":
            target = masks.masks[0]
        samples.extend(
            make_sample(
                pixels,
                target,
                record["label_kind"],
                _sub_seed(seed, index),
                input_hw=input_hw,
                points_per_prompt=points_per_prompt,
                stats=stats,
            )
        )
    return samples
