"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI should use when it is
raised out of a command, the same way route handlers map failures onto
HTTP status codes.
"""


class ShuffleUNetError(Exception):
    """Base class for all expected failures"""

    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class UsageError(ShuffleUNetError):
    """Invalid flags or flag combinations"""

    exit_code = 1


class ConfigurationError(ShuffleUNetError):
    """Invalid model/training configuration or incompatible checkpoint"""

    exit_code = 1


class DataError(ShuffleUNetError):
    """Unreadable, missing or inconsistent input data"""

    exit_code = 2


class ShapeError(DataError, ValueError):
    """Tensor or volume dimensions violate an operation's contract"""


class CoverageError(DataError):
    """Patch aggregation left voxels uncovered"""


class NumericalError(ShuffleUNetError):
    """Non-finite loss or a singular linear system"""

    exit_code = 3
