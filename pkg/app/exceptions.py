"""
Domain Errors
=============
Exception hierarchy shared by the services and the command-line layer.

Services raise these; ``app.main`` turns any ``CFFError`` into a one-line
diagnostic and a non-zero exit status.
"""

from typing import Optional


class CFFError(Exception):
    """Base class for every error raised by the projection engine."""


class BehindCamera(CFFError, ValueError):
    """A camera-frame point with z <= 0 was passed to the pinhole projection."""


class NonPositiveDepth(CFFError, ValueError):
    """Back-projection was asked for a depth <= 0."""


class DimensionMismatch(CFFError, ValueError):
    """Two grids that must be aligned have different shapes."""


class EmptyDepth(CFFError, ValueError):
    """Depth completion was given a sparse map without a single valid sample."""


class PointOutOfRange(CFFError, ValueError):
    """A point handed to BEV pooling falls outside the grid."""


class InvalidRange(CFFError, ValueError):
    """Augmentation sampling ranges are malformed."""


class InvalidThreshold(CFFError, ValueError):
    """A heatmap threshold outside [0, 1]."""


class ConfigError(CFFError, ValueError):
    """Bad configuration value or unknown configuration key."""


class ParseError(CFFError, ValueError):
    """A text input could not be parsed."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class FormatError(CFFError, ValueError):
    """A binary file has a bad magic, rank or payload size."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message}")


class IoError(CFFError, OSError):
    """An input could not be read or an output could not be written."""


class FrameError(CFFError):
    """A per-camera stage failed; the message names the camera."""

    def __init__(self, camera: str, cause: Exception):
        self.camera = camera
        self.cause = cause
        super().__init__(f"camera '{camera}': {cause}")
