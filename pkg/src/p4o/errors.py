"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid run or architecture configuration."""


class EnvProtocolError(RuntimeError):
    """An environment (built-in or subprocess) violated its protocol."""
