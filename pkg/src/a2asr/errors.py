"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed, missing or degenerate input data."""
