"""Exception hierarchy shared across the library and mapped to CLI exit codes."""


class GrasensError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigurationError(GrasensError):
    """Invalid shapes, incompatible configs, bad flag combinations."""

    exit_code = 2


class UsageError(GrasensError):
    """API misuse (e.g. backward on a non-scalar)."""

    exit_code = 2


class ParseError(GrasensError):
    """Malformed input file. Carries the byte offset where parsing failed."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(GrasensError):
    """Data that parses but cannot be used (too short, empty manifest, ...)."""

    exit_code = 3


class DivergenceError(GrasensError):
    """Training produced a non-finite loss."""

    exit_code = 4
