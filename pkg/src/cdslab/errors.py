"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems exit 2, data problems
exit 3 and numeric aborts exit 4.
"""


class CDSError(Exception):
    """Base class for all errors raised by cdslab."""


class DimensionError(CDSError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class NumericDomainError(CDSError, ValueError):
    """An input lies outside the domain of a numeric function."""


class NumericError(CDSError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""


class ConfigError(CDSError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(CDSError, OSError):
    """Dataset files are missing or unreadable."""


class FormatError(DataError):
    """A binary file does not follow its declared layout."""


class CheckpointError(ConfigError):
    """A checkpoint is corrupt or does not match the requested architecture."""
