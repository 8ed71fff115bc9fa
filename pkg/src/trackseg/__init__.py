"""trackseg: streaming video object segmentation from tracked point prompts.

The pipeline decouples video segmentation into sparse query-point tracking
and per-frame point-prompted mask prediction, with deterministic reference
trackers/segmenters so every contract is testable on a CPU.
"""

__version__ = "0.1.0"

from .core import (
    BinaryMask,
    BoxPrompt,
    Frame,
    InstanceMaskSet,
    Point,
    QueryPointSet,
    TrackedPointSet,
)

__all__ = [
    "__version__",
    "BinaryMask",
    "BoxPrompt",
    "Frame",
    "InstanceMaskSet",
    "Point",
    "QueryPointSet",
    "TrackedPointSet",
]
