"""
Typed errors raised across the mlx_handnerf package.
"""
from typing import Any, Dict, Optional


class HandNeRFError(Exception):
    """Base class for every error the package raises on purpose."""


class ConfigurationError(HandNeRFError, ValueError):
    pass


class GeometryError(HandNeRFError, ValueError):
    pass


class ShapeMismatchError(HandNeRFError, ValueError):
    pass


class NonFiniteError(HandNeRFError, FloatingPointError):
    """Raised when a loss or gradient carries NaN/inf entries."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TrainingDivergedError(NonFiniteError):
    def __init__(
        self,
        message: str,
        diagnostics: Optional[Dict[str, Any]] = None,
        last_good_checkpoint: Optional[str] = None,
    ):
        super().__init__(message, diagnostics)
        self.last_good_checkpoint = last_good_checkpoint


class FormatError(HandNeRFError, ValueError):
    """Base class for malformed files."""


class MagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MissingFeatureError(HandNeRFError, KeyError):
    pass


class UnknownFrameError(HandNeRFError, KeyError):
    pass
