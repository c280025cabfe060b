"""Exception hierarchy shared by the pipeline.

Each class carries the process exit code the command-line front end uses
when the error escapes a command.
"""


class CalfrontError(Exception):
    exit_code = 1


class ValidationError(CalfrontError, ValueError):
    """Bad configuration, arguments or geometry."""

    exit_code = 2


class DataError(CalfrontError):
    """Missing, malformed or inconsistent data on disk or in memory."""

    exit_code = 3


class NumericalError(CalfrontError, FloatingPointError):
    """Non-finite loss or activations during training."""

    exit_code = 4
