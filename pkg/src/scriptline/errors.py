"""Exception types shared across the toolkit.

I/O failures use the builtin OSError family; these cover bad
configuration and bad data, which the CLI maps to distinct exit codes.
"""


class ConfigError(Exception):
    """A configuration value or key is invalid."""


class DataError(Exception):
    """Input data violates a documented contract (charset, shapes, ...)."""


class FormatError(DataError):
    """A file does not conform to its declared format."""
