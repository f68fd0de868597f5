"""Exception types shared across the package."""


class RasterFormatError(Exception):
    """A file does not conform to the expected binary layout."""


class BadMagicError(RasterFormatError):
    """The file does not start with the expected magic bytes."""


class UnsupportedVersionError(RasterFormatError):
    """The file declares a format version this code cannot read."""


class TruncatedFileError(RasterFormatError):
    """The file ends before the declared payload is complete."""


class CoverageError(ValueError):
    """A region or category that must be covered has no data."""


class ConfigError(ValueError):
    """A run configuration is invalid or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
