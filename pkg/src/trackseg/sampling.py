"""Query-point selection inside a first-frame region of interest.

Strategies: random, grid, shi_tomasi, kmedoids (default), manual. All emitted
points use the pixel-center convention: cell (r, c) -> point (c + 0.5, r + 0.5),
and every generated point satisfies mask membership. Everything is
deterministic for a fixed seed, with ties broken by lowest input index.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from .core import BinaryMask, Frame, InstanceMaskSet, Point, QueryPointSet, point_in_mask
from .errors import EmptyRegionError, InvalidArgumentError
from .imaging import to_grayscale

STRATEGY_KINDS = ("random", "grid", "shi_tomasi", "kmedoids", "manual")

# Mask pixel sets are thinned to this population before PAM; keeps SWAP sweeps
# bounded while staying deterministic.
_KMEDOIDS_MAX_CANDIDATES = 2048

# Below this many candidate medoid subsets, enumerate them all instead of
# running PAM. PAM's best-improvement SWAP can stall in a local optimum even
# on instances this small (observed on ~8% of random 12-point inputs), and
# exact search is cheap here.
_EXACT_SEARCH_LIMIT = 20000


@dataclass(frozen=True)
class SamplingStrategy:
    """How query points are drawn inside each instance mask."""

    kind: str = "kmedoids"
    points_per_instance: int = 5
    seed: int = 0
    manual_points: Mapping[int, tuple[Point, ...]] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvalidArgumentError(f"unknown strategy kind {self.kind!r}, expected one of {STRATEGY_KINDS}")
        if not 1 <= self.points_per_instance <= 9:
            raise InvalidArgumentError(
                f"points_per_instance must be in [1, 9], got {self.points_per_instance}"
            )
        if self.kind == "manual" and not self.manual_points:
            raise InvalidArgumentError("manual strategy requires manual_points")
        if self.manual_points is not None:
            frozen = {int(k): tuple(v) for k, v in dict(self.manual_points).items()}
            object.__setattr__(self, "manual_points", frozen)


def _pairwise_distances(coords: np.ndarray) -> np.ndarray:
    return cdist(coords, coords)


def _config_cost(dists: np.ndarray, medoids: Sequence[int]) -> float:
    return float(dists[:, list(medoids)].min(axis=1).sum())


def kmedoids(points: Sequence[Point], k: int, seed: int = 0) -> list[Point]:
    """K-Medoids over Euclidean distance on pixel coordinates.

    Minimises the total distance from each point to its nearest medoid.
    Small instances are solved exactly by subset enumeration; larger ones by
    PAM (greedy BUILD then SWAP to a local optimum). Ties break toward the
    lowest input index, and on the PAM path cost-neutral swaps that lower the
    medoid index set are applied, so the result is a deterministic, canonical
    member of any tied optimum. Returns k members of the input, in index
    order.
    """
    n = len(points)
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if k > n:
        raise InvalidArgumentError(f"k={k} exceeds population {n}")
    if k == n:
        return list(points)

    coords = np.array([(p.x, p.y) for p in points], dtype=np.float64)
    dists = _pairwise_distances(coords)
    if math.comb(n, k) <= _EXACT_SEARCH_LIMIT:
        chosen = _exact_medoids(dists, k)
    else:
        chosen = _pam_medoids(dists, k)
    return [points[i] for i in sorted(chosen)]


def _exact_medoids(dists: np.ndarray, k: int) -> list[int]:
    n = dists.shape[0]
    if k == 1:
        return [int(np.argmin(dists.sum(axis=0)))]
    best_cost = math.inf
    best: tuple[int, ...] | None = None
    # Lexicographic enumeration means the first subset hitting the minimum is
    # already the lowest-index tie winner.
    for combo in itertools.combinations(range(n), k):
        cost = float(dists[:, combo].min(axis=1).sum())
        if cost < best_cost and not math.isclose(cost, best_cost, rel_tol=1e-12):
            best_cost = cost
            best = combo
    assert best is not None
    return list(best)


def _pam_medoids(dists: np.ndarray, k: int) -> list[int]:
    n = dists.shape[0]

    # BUILD: start with the 1-medoid optimum, then greedily add the point
    # that most reduces total cost. np.argmin returns the first (lowest
    # index) minimiser, which is exactly the tie rule.
    medoids = [int(np.argmin(dists.sum(axis=1)))]
    nearest = dists[:, medoids[0]].copy()
    while len(medoids) < k:
        costs = np.minimum(nearest[:, None], dists).sum(axis=0)
        costs[medoids] = np.inf
        best = int(np.argmin(costs))
        medoids.append(best)
        nearest = np.minimum(nearest, dists[:, best])

    # SWAP: repeatedly apply the best (medoid, candidate) exchange. A swap is
    # taken when it strictly lowers the cost, or keeps the cost bit-equal
    # while lexicographically lowering the sorted medoid index tuple.
    current = _config_cost(dists, medoids)
    while True:
        med_cols = dists[:, medoids]
        order = np.argsort(med_cols, axis=1)
        nearest_val = med_cols[np.arange(n), order[:, 0]]
        nearest_pos = order[:, 0]
        second_val = (
            med_cols[np.arange(n), order[:, 1]] if len(medoids) > 1 else np.full(n, np.inf)
        )
        best_cost = math.inf
        best_swap = None
        in_medoids = np.zeros(n, bool)
        in_medoids[medoids] = True
        for pos, m in enumerate(medoids):
            base = np.where(nearest_pos == pos, second_val, nearest_val)
            cand_costs = np.minimum(base[:, None], dists).sum(axis=0)
            cand_costs[in_medoids] = np.inf
            c = int(np.argmin(cand_costs))
            if cand_costs[c] < best_cost:
                best_cost = float(cand_costs[c])
                best_swap = (pos, c)
        if best_swap is None:
            break
        if best_cost < current:
            medoids[best_swap[0]] = best_swap[1]
            current = best_cost
            continue
        # Canonicalisation pass over cost-neutral swaps.
        applied = False
        best_tuple = tuple(sorted(medoids))
        best_neutral = None
        for pos, m in enumerate(medoids):
            base = np.where(nearest_pos == pos, second_val, nearest_val)
            cand_costs = np.minimum(base[:, None], dists).sum(axis=0)
            for c in np.nonzero(cand_costs == current)[0]:
                if in_medoids[c]:
                    continue
                candidate = tuple(sorted(medoids[:pos] + [int(c)] + medoids[pos + 1 :]))
                if candidate < best_tuple:
                    best_tuple = candidate
                    best_neutral = (pos, int(c))
        if best_neutral is not None:
            medoids[best_neutral[0]] = best_neutral[1]
            applied = True
        if not applied:
            break

    return medoids


def _mask_cell_centers(mask: BinaryMask) -> list[Point]:
    rows, cols = np.nonzero(mask.bits)
    return [Point(c + 0.5, r + 0.5) for r, c in zip(rows.tolist(), cols.tolist())]


def sample_random(mask: BinaryMask, k: int, seed: int = 0) -> list[Point]:
    """k uniform draws over set-pixel centers; replacement only when the
    population is smaller than k."""
    centers = _mask_cell_centers(mask)
    if not centers:
        raise EmptyRegionError("cannot sample from an empty mask")
    rng = np.random.default_rng(seed)
    replace_draws = len(centers) < k
    idx = rng.choice(len(centers), size=k, replace=replace_draws)
    return [centers[int(i)] for i in idx]


def sample_grid(mask: BinaryMask, k: int) -> list[Point]:
    """Square lattice over the mask bounding box, stride floor(sqrt(bbox_area/k)).

    Lattice points start at offset s/2 from the bbox origin; cell centers whose
    cell lies inside the mask are kept in row-major order and truncated to k.
    When too few survive, the stride is halved (floor, minimum 1) and the
    lattice is recomputed; at stride 1 the surviving points are the mask pixel
    centers, which are cycled if the population is below k.
    """
    rows, cols = np.nonzero(mask.bits)
    if rows.size == 0:
        raise EmptyRegionError("cannot sample from an empty mask")
    rmin, rmax = int(rows.min()), int(rows.max())
    cmin, cmax = int(cols.min()), int(cols.max())
    bbox_area = (rmax - rmin + 1) * (cmax - cmin + 1)
    s = max(1, math.floor(math.sqrt(bbox_area / k)))
    while True:
        xs = np.arange(cmin + s / 2.0, cmax + 1, s)
        ys = np.arange(rmin + s / 2.0, rmax + 1, s)
        pts = [
            Point(x, y)
            for y in ys
            for x in xs
            if mask.bits[math.floor(y), math.floor(x)]
        ]
        if len(pts) >= k:
            return pts[:k]
        if s == 1:
            return [pts[i % len(pts)] for i in range(k)]
        s = max(1, s // 2)


def _min_eigenvalue_scores(frame: Frame) -> np.ndarray:
    """Minimum eigenvalue of the 3x3-windowed structure tensor of the luma."""
    gray = to_grayscale(frame.pixels)
    ix = ndimage.sobel(gray, axis=1, mode="nearest")
    iy = ndimage.sobel(gray, axis=0, mode="nearest")
    w = dict(size=3, mode="nearest")
    ixx = ndimage.uniform_filter(ix * ix, **w)
    iyy = ndimage.uniform_filter(iy * iy, **w)
    ixy = ndimage.uniform_filter(ix * iy, **w)
    trace = ixx + iyy
    det_term = np.sqrt((ixx - iyy) ** 2 + 4.0 * ixy**2)
    return 0.5 * (trace - det_term)


def shi_tomasi_corners(frame: Frame, mask: BinaryMask, k: int, seed: int = 0) -> list[Point]:
    """Top-k corner points inside the mask by minimum structure-tensor eigenvalue.

    Greedy selection with a 5 px non-maximum-suppression radius and a quality
    floor of 1% of the best masked score. Shortfall is padded with K-Medoids
    samples over the remaining mask pixels.
    """
    if mask.is_empty:
        raise EmptyRegionError("cannot sample from an empty mask")
    if (mask.height, mask.width) != (frame.height, frame.width):
        raise InvalidArgumentError("mask dimensions must match the frame")
    scores = _min_eigenvalue_scores(frame)
    masked = np.where(mask.bits, scores, -np.inf)
    floor = 0.01 * float(masked.max())
    rows, cols = np.nonzero(mask.bits & (scores > floor))
    chosen: list[tuple[int, int]] = []
    if rows.size:
        vals = scores[rows, cols]
        # Sort by score descending, row-major index ascending on ties.
        flat_idx = rows * mask.width + cols
        order = np.lexsort((flat_idx, -vals))
        for i in order:
            r, c = int(rows[i]), int(cols[i])
            if all((r - rr) ** 2 + (c - cc) ** 2 > 25 for rr, cc in chosen):
                chosen.append((r, c))
                if len(chosen) == k:
                    break
    points = [Point(c + 0.5, r + 0.5) for r, c in chosen]
    if len(points) < k:
        taken = set(chosen)
        rest = [
            Point(c + 0.5, r + 0.5)
            for r, c in zip(*np.nonzero(mask.bits))
            if (int(r), int(c)) not in taken
        ]
        if rest:
            pad_k = min(k - len(points), len(rest))
            points.extend(kmedoids(rest, pad_k, seed))
        while len(points) < k:
            points.append(points[len(points) % max(1, len(chosen) or 1)])
    return points


def _instance_seed(seed: int, instance_id: int) -> int:
    return int(np.random.SeedSequence([seed, instance_id]).generate_state(1)[0])


def _kmedoids_candidates(mask: BinaryMask, seed: int) -> list[Point]:
    rows, cols = np.nonzero(mask.bits)
    if rows.size > _KMEDOIDS_MAX_CANDIDATES:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(rows.size, _KMEDOIDS_MAX_CANDIDATES, replace=False))
        rows, cols = rows[keep], cols[keep]
    return [Point(c + 0.5, r + 0.5) for r, c in zip(rows.tolist(), cols.tolist())]


def sample_query_points(
    frame: Frame, masks: InstanceMaskSet, strategy: SamplingStrategy
) -> list[QueryPointSet]:
    """One QueryPointSet per instance, sampled by the configured strategy.

    Every emitted point lies inside its instance mask; instances are processed
    in ascending id order with per-instance derived seeds, so results do not
    depend on mapping iteration order.
    """
    out: list[QueryPointSet] = []
    n = strategy.points_per_instance
    for iid in masks.instance_ids:
        mask = masks.masks[iid]
        if mask.is_empty:
            raise EmptyRegionError(f"instance {iid} has an empty mask")
        sub_seed = _instance_seed(strategy.seed, iid)
        if strategy.kind == "random":
            pts = sample_random(mask, n, sub_seed)
        elif strategy.kind == "grid":
            pts = sample_grid(mask, n)
        elif strategy.kind == "shi_tomasi":
            pts = shi_tomasi_corners(frame, mask, n, sub_seed)
        elif strategy.kind == "kmedoids":
            centers = _kmedoids_candidates(mask, sub_seed)
            if len(centers) < n:
                pts = [centers[i % len(centers)] for i in range(n)]
            else:
                pts = kmedoids(centers, n, sub_seed)
        elif strategy.kind == "manual":
            provided = (strategy.manual_points or {}).get(iid)
            if not provided:
                raise InvalidArgumentError(f"manual strategy has no points for instance {iid}")
            for p in provided:
                if not point_in_mask(p, mask):
                    raise InvalidArgumentError(
                        f"manual point ({p.x}, {p.y}) falls outside instance {iid}'s mask"
                    )
            pts = list(provided)
        else:  # pragma: no cover - guarded by SamplingStrategy
            raise InvalidArgumentError(f"unknown strategy kind {strategy.kind!r}")
        out.append(QueryPointSet(instance_id=iid, points=tuple(pts), birth_frame=frame.index))
    return out


def with_seed(strategy: SamplingStrategy, seed: int) -> SamplingStrategy:
    return replace(strategy, seed=seed)
