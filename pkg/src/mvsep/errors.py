"""Exception types shared across the toolkit."""


class MvsepError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(MvsepError, ValueError):
    """Array shapes do not agree."""


class ContractError(MvsepError, ValueError):
    """A precondition of an operation was violated."""


class StateError(MvsepError, RuntimeError):
    """An object is not in a state that allows the requested operation."""


class ConfigurationError(MvsepError, ValueError):
    """Invalid user-supplied configuration."""


class NonFiniteError(MvsepError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class FormatError(MvsepError, ValueError):
    """A file could not be parsed.

    Args:
        message: what went wrong.
        offset: byte offset in the file where the problem was detected.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
