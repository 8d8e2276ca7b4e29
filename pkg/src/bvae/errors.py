"""Exception hierarchy and process exit codes.

Every error raised by this package derives from BvaeError so the CLI can
map failure classes onto distinct exit codes.
"""


class BvaeError(Exception):
    pass


class ShapeError(BvaeError):
    """Tensor geometry does not compose (wrong rank, extent, or channels)."""


class ConfigError(BvaeError):
    """Invalid configuration value or unsupported combination."""


class UsageError(BvaeError):
    """API called out of order, e.g. backward before forward."""


class ValidationError(BvaeError):
    """Input data violates a documented precondition (bad labels etc.)."""


class DataError(BvaeError):
    """Dataset files missing, malformed, truncated, or checksum-mismatched."""


class NumericError(BvaeError):
    """Non-finite value encountered during training or optimization."""


EXIT_OK = 0
EXIT_FAILURE = 1       # unexpected errors
EXIT_CONFIG = 2        # ConfigError / UsageError / ValidationError
EXIT_DATA = 3          # DataError
EXIT_NUMERIC = 4       # NumericError


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, UsageError, ValidationError)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_FAILURE
