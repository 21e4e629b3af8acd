"""Exception hierarchy shared across the package.

CLI exit-code mapping: ConfigError -> 2, DataError -> 3,
DivergenceError / NumericError -> 4. UsageError and DomainError signal
caller bugs and are allowed to surface as tracebacks.
"""


class RadfieldError(Exception):
    """Base class for all package errors."""


class ConfigError(RadfieldError):
    """Invalid or inconsistent configuration (unknown keys, bad widths...)."""


class DataError(RadfieldError):
    """Broken files on disk: datasets, checkpoints, pose files."""


class DomainError(RadfieldError):
    """Operand outside an operation's documented domain."""


class UsageError(RadfieldError):
    """API contract violation: mismatched shapes, stale caches."""


class NumericError(RadfieldError):
    """Non-finite values where finite ones are required."""


class DivergenceError(RadfieldError):
    """Training loss became non-finite and stayed there."""
