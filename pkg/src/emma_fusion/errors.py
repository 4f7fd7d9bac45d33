"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class EmmaError(Exception):
    """Base class for all package errors."""

    category = "error"
    exit_code = 1


class InputError(EmmaError, ValueError):
    """Arguments outside an operation's accepted domain."""

    category = "rejected_input"
    exit_code = 3


class ShapeError(EmmaError, ValueError):
    category = "shape"
    exit_code = 4


class FormatError(EmmaError, ValueError):
    """Malformed image, tensor or checkpoint file.

    ``field`` names the offending part of the file (``magic``, ``maxval``,
    ``payload``...).
    """

    category = "format"
    exit_code = 5

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigError(EmmaError, ValueError):
    category = "config"
    exit_code = 6


class TrainingError(EmmaError, RuntimeError):
    """Raised when a loss turns non-finite; the message names the step."""

    category = "training"
    exit_code = 7


class MissingFileError(EmmaError, FileNotFoundError):
    category = "missing_file"
    exit_code = 8
