"""Error hierarchy shared by every pipeline stage.

The CLI maps ``ConfigurationError`` (and pydantic validation failures) to exit code 1
and every other ``DDNetError`` to exit code 2.
"""
from pathlib import Path
from typing import Optional, Union


class DDNetError(Exception):
    """Base class for all domain errors"""


class ConfigurationError(DDNetError):
    """Invalid or missing configuration; ``key_path`` names the offending entry"""

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class UsageError(ConfigurationError):
    """Unknown subcommand or malformed flags"""


class ShapeMismatchError(DDNetError, ValueError):
    pass


class NonFiniteError(DDNetError, ArithmeticError):
    """NaN or Inf appeared in a loss, gradient or field"""


class StabilityError(DDNetError):
    """CFL or diffusion stability bound violated"""


class InsufficientDataError(DDNetError):
    pass


class VerificationError(DDNetError):
    pass


class CheckpointError(DDNetError):
    pass


class BadMagicError(CheckpointError):
    pass


class FormatVersionError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ChecksumMismatchError(CheckpointError):
    pass


class DatasetError(DDNetError):
    pass


class CorruptFieldFileError(DatasetError):
    def __init__(self, path: Union[str, Path], reason: str):
        self.path = Path(path)
        super().__init__(f"{self.path}: {reason}")


class ManifestMismatchError(DatasetError):
    pass


class DatasetLockedError(DatasetError):
    pass
