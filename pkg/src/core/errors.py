"""
Base exception for the toolkit.

Every service module defines its own subclass so callers can catch one
family (``except HybridAmError``) or a specific stage.
"""


class HybridAmError(Exception):
    """Root of all errors raised by hybridam services."""

    pass


class ConfigError(HybridAmError):
    """Raised when a pipeline configuration file cannot be loaded."""

    pass
