# Core package
from core.errors import ConfigError, HybridAmError
from core.logging import get_logger, setup_logging, LogLevel

__version__ = "0.1.0"

__all__ = [
    "get_logger",
    "setup_logging",
    "LogLevel",
    "HybridAmError",
    "ConfigError",
    "__version__",
]
