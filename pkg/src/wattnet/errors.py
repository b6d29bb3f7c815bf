"""Exception hierarchy shared by every module."""


class WattError(Exception):
    """Base class for all library errors."""


class DimensionMismatchError(WattError, ValueError):
    pass


class ConfigurationError(WattError, ValueError):
    pass


class InvalidInputError(WattError, ValueError):
    pass


class ContractError(WattError, ValueError):
    pass


class DecodeError(WattError, ValueError):
    """Malformed image bytes. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestionError(WattError):
    pass


class SplitError(WattError, ValueError):
    pass


class CalibrationError(WattError):
    """No exact architecture found; ``report`` holds the best-achievable deltas."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NumericError(WattError, FloatingPointError):
    """Non-finite loss or gradient. ``state`` carries the last good weights, if any."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class CheckpointError(WattError):
    pass
