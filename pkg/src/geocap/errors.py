"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric failures exit 3.
"""


class GeocapError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UsageError(GeocapError):
    """Bad command line, unknown flag or inconsistent options."""

    exit_code = 1


class DataFormatError(GeocapError):
    """A data file is missing, malformed or violates an invariant."""

    exit_code = 2


class ConfigError(GeocapError):
    """Configuration values are inconsistent (shapes, variants, hashes)."""

    exit_code = 2


class NumericError(GeocapError):
    """A numeric procedure failed (non-finite loss, degenerate labels)."""

    exit_code = 3
