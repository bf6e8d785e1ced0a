"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.  Plain ValueError is reserved for in-process API misuse.
"""


class MarnError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(MarnError):
    """Invalid or inconsistent configuration."""


class DataError(MarnError):
    """Malformed input file, manifest, or embedding table."""


class NumericError(MarnError):
    """Numeric failure at runtime (non-finite loss, empty softmax, ...)."""
