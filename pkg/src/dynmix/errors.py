"""Shared exception types and CLI exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    """Invalid configuration or missing artifact (exit code 2)."""


class NumericalError(Exception):
    """Non-finite values or degenerate numerics (exit code 3)."""


class ScheduleParseError(ConfigError):
    """Malformed schedule spec; carries the offending character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position
