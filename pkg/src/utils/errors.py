"""Exception types raised across the package.

Every error also derives from ``ValueError`` so callers that only catch
``ValueError`` keep working.
"""


class CTEError(ValueError):
    """Base class for all package errors"""


class ConfigError(CTEError):
    """Invalid or unknown configuration value"""


class DimensionError(CTEError):
    """Image, patch or matrix dimensions do not fit together"""


class ChannelKindError(CTEError):
    """A bit function reads a channel of the wrong kind"""


class DatasetFormatError(CTEError):
    """A dataset file is malformed, truncated or inconsistent"""


class ModelFormatError(CTEError):
    """A model file is malformed or truncated"""


class ModelVersionError(ModelFormatError):
    """A model file was written by an unsupported format version"""


class ChecksumError(ModelFormatError):
    """A model file failed its CRC32 check"""


class TrainingError(CTEError):
    """Training cannot proceed with the given sample or settings"""
