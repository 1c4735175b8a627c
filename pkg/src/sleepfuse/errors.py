"""Exception taxonomy, mirrored by the CLI exit codes.

ConfigError    -> exit 1 (usage / inconsistent configuration)
DataError      -> exit 2 (unreadable, malformed, or out-of-contract data)
InvariantError -> exit 3 (internal invariant or assertion violated)
"""


class SleepfuseError(Exception):
    """Base class for all package errors."""


class ConfigError(SleepfuseError):
    """Invalid or mutually inconsistent configuration."""


class DataError(SleepfuseError):
    """Input data violates a documented contract (range, shape, format)."""


class FormatError(DataError):
    """A binary or text artifact does not match its documented layout."""


class AlignmentError(DataError):
    """Sensor streams and labels disagree beyond the one-epoch tolerance."""


class InvariantError(SleepfuseError):
    """An internal invariant failed; indicates a bug, not bad input."""


class TrainingError(InvariantError):
    """Training aborted (non-finite loss or gradient)."""
