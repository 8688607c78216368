"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class ShapeforgeError(Exception):
    """Base class for all errors raised by this package."""


class ImageTooSmall(ShapeforgeError, ValueError):
    pass


class IndivisibleDimensions(ShapeforgeError, ValueError):
    pass


class InvalidPermutation(ShapeforgeError, ValueError):
    pass


class ShapeMismatch(ShapeforgeError, ValueError):
    pass


class InvalidLambda(ShapeforgeError, ValueError):
    pass


class InvalidLevel(ShapeforgeError, ValueError):
    pass


class OddBatchSize(ShapeforgeError, ValueError):
    pass


class EmptyPool(ShapeforgeError, ValueError):
    pass


class EmptySplit(ShapeforgeError, ValueError):
    pass


class NotConflictSplit(ShapeforgeError, ValueError):
    pass


class ConfigError(ShapeforgeError, ValueError):
    pass


class DataError(ShapeforgeError):
    """Problems with dataset or checkpoint files on disk."""


class MissingDataset(DataError, FileNotFoundError):
    pass


class MissingCheckpoint(DataError, FileNotFoundError):
    pass


class ChecksumMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class RunLocked(DataError):
    """Another command holds the lock on the same run directory."""


class DivergedLoss(ShapeforgeError, FloatingPointError):
    pass


class DegenerateDimension(UserWarning):
    """Emitted when an embedding dimension has zero variance over a pair set."""
