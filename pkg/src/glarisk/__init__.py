"""PU-learning risk models for glucose-lowering therapy from expenditure records."""

__version__ = "0.1.0"

from .errors import AtcParseError, ConfigError, DataError, GenerationError, GlaRiskError  # noqa: E402

__all__ = ["__version__", "GlaRiskError", "ConfigError", "DataError", "AtcParseError", "GenerationError"]
