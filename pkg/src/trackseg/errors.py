"""Exception hierarchy shared by all trackseg modules."""

from __future__ import annotations


class TracksegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(TracksegError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class RLEDecodeError(TracksegError, ValueError):
    """RLE counts are malformed or inconsistent with the stated dimensions."""


class EmptyRegionError(TracksegError):
    """An operation needed a non-empty region (mask, component) and found none."""


class OrderingError(TracksegError):
    """Frames were supplied out of order to a streaming consumer."""


class CapabilityError(TracksegError):
    """An adapter was asked for a capability it does not declare."""


class TrackerBackendError(TracksegError):
    """A tracker adapter failed; carries the adapter name (and frame index if known)."""

    def __init__(self, adapter_name: str, message: str, frame_index: int | None = None):
        self.adapter_name = adapter_name
        self.frame_index = frame_index
        at = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"tracker backend '{adapter_name}' failed{at}: {message}")


class SegmenterBackendError(TracksegError):
    """A segmenter adapter failed; carries the adapter name (and frame index if known)."""

    def __init__(self, adapter_name: str, message: str, frame_index: int | None = None):
        self.adapter_name = adapter_name
        self.frame_index = frame_index
        at = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"segmenter backend '{adapter_name}' failed{at}: {message}")


class ConfigError(TracksegError):
    """A configuration document or adapter wiring is invalid; carries the field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config error at '{field}': {message}")


class AlignmentError(TracksegError):
    """Prediction and ground-truth frame indices do not line up."""

    def __init__(self, message: str, indices: tuple[int, ...] = ()):
        self.indices = tuple(indices)
        super().__init__(message)


class InsufficientDataError(TracksegError):
    """A measurement needed more samples than the input provided."""


class ManifestError(TracksegError):
    """A dataset directory is inconsistent; carries the offending paths."""

    def __init__(self, message: str, paths: tuple[str, ...] = ()):
        self.paths = tuple(paths)
        super().__init__(message)


class StateError(TracksegError):
    """An illegal session state transition was requested."""


class NotFoundError(TracksegError):
    """The referenced session or resource does not exist."""
