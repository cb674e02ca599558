"""Exception hierarchy shared by every cris module."""

from __future__ import annotations


class CrisError(Exception):
    """Base class for all cris errors."""


class InvalidThresholdError(CrisError, ValueError):
    """Threshold outside [0, 1]."""


class ShapeMismatchError(CrisError, ValueError):
    """Array shapes disagree or fall below a size minimum."""


class NonBinaryMaskError(CrisError, ValueError):
    """Mask contains a value other than 0 or 1."""


class OutOfRangePixelError(CrisError, ValueError):
    """Image or probability value outside [0, 1]."""


class ConfigError(CrisError, ValueError):
    """Invalid configuration value."""


class UnpairedStemError(CrisError, KeyError):
    """An image has no mask with the same stem (or vice versa)."""

    def __init__(self, stem: str, side: str = "mask") -> None:
        self.stem = stem
        super().__init__(f"No {side} found for stem {stem!r}")

    def __str__(self) -> str:
        return str(self.args[0])


class UnreadableFileError(CrisError, OSError):
    """A raster file could not be decoded."""


class DuplicateSampleError(CrisError, ValueError):
    """Two samples in one dataset share an id."""


class EmptyDatasetError(CrisError, ValueError):
    """Directory produced zero samples."""


class DatasetTooSmallError(CrisError, ValueError):
    """Dataset too small to split."""


class EmptySplitError(CrisError, ValueError):
    """Training split is empty."""


class ManifestMismatchError(CrisError, ValueError):
    """An existing split manifest disagrees with the one being written."""


class IntegrityError(CrisError, ValueError):
    """Checkpoint is empty, truncated or fails its digest."""


class VersionMismatchError(CrisError, ValueError):
    """Persisted artifact has an unsupported format version."""


class ConfigMismatchError(CrisError, ValueError):
    """Checkpoint was written for a different model configuration."""


class ExperimentSpecError(CrisError, ValueError):
    """Error in experiment file parsing."""
