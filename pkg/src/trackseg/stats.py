"""Small numeric helpers shared by the pipeline and the eval bench."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

from .errors import InsufficientDataError, InvalidArgumentError


def nearest_rank_percentile(values: Sequence[float], q: float) -> float:
    """Order-statistic percentile: smallest element with at least q of the
    sample at or below it (no interpolation)."""
    if not values:
        raise InsufficientDataError("percentile of an empty sample")
    if not 0.0 < q <= 1.0:
        raise InvalidArgumentError(f"q must be in (0, 1], got {q}")
    ordered = sorted(values)
    rank = math.ceil(q * len(ordered))
    return float(ordered[rank - 1])


def latency_summary(values: Sequence[float]) -> Mapping[str, float]:
    """p50/p90/p99 of a latency sample, in the sample's own units."""
    return {
        "p50": nearest_rank_percentile(values, 0.50),
        "p90": nearest_rank_percentile(values, 0.90),
        "p99": nearest_rank_percentile(values, 0.99),
    }
