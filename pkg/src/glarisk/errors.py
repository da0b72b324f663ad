"""Exception hierarchy shared by all modules."""


class GlaRiskError(Exception):
    """Base class for package errors."""


class ConfigError(GlaRiskError, ValueError):
    """Invalid parameters, windows or plan settings."""


class DataError(GlaRiskError, ValueError):
    """Malformed or inconsistent input data."""


class AtcParseError(DataError):
    """An ATC code string does not have the 5-level structure."""

    def __init__(self, code, position, reason):
        self.code = code
        self.position = position
        super().__init__(f"invalid ATC code {code!r} at position {position}: {reason}")


class GenerationError(GlaRiskError):
    """A synthetic generator configuration cannot be realized."""
