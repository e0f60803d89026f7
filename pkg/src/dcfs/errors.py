"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: configuration errors exit 2,
data/model mismatches exit 3, numeric failures exit 4.
"""


class ConfigurationError(Exception):
    """Invalid configuration: unknown keys, bad architecture ids, shape
    mismatches that stem from wiring rather than data."""


class DataError(Exception):
    """Malformed or inconsistent data: labels out of range, array shape
    mismatches, empty batches."""


class NumericError(Exception):
    """Numeric failure during computation: non-finite losses or inputs,
    degenerate statistics that cannot be recovered from."""
