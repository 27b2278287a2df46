"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes: usage problems exit 1, data and
format problems exit 2, numeric failures exit 3.
"""


class PriorLaneError(Exception):
    exit_code = 1


class UsageError(PriorLaneError):
    exit_code = 1


class ShapeError(UsageError):
    """Operand extents are incompatible."""


class ConfigError(UsageError):
    pass


class DataError(PriorLaneError):
    exit_code = 2


class FormatError(DataError):
    """A file has a bad magic number, version, or is truncated."""


class NumericError(PriorLaneError):
    exit_code = 3
