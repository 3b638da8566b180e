"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Input values fall outside an operation's numeric domain."""


class DataError(ValueError):
    """Malformed data: labels out of range, non-binary masks, empty sets."""


class FormatError(ValueError):
    """Malformed file on ingest (bad magic number, truncated payload)."""


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""
