"""Exception hierarchy shared across the package.

Each class carries the process exit code the CLI maps it to: 2 for bad
arguments or configuration, 3 for malformed data or shape mismatches, 4 for
numerical failure (NaN/Inf). Anything else is an ordinary bug (exit 1).
"""


class ScenecountError(Exception):
    exit_code = 1


class ConfigError(ScenecountError):
    """Invalid configuration or argument values."""

    exit_code = 2


class StateError(ScenecountError):
    """Operation issued against an object in the wrong state."""

    exit_code = 2


class DataError(ScenecountError):
    """Malformed input data or files."""

    exit_code = 3


class DimensionError(DataError):
    """Array extents incompatible with the requested operation."""

    exit_code = 3


class NumericalError(ScenecountError):
    """A computation produced NaN or Inf."""

    exit_code = 4
