# Command-line package
from cli.app import __version__, build_parser, main

__all__ = ["__version__", "build_parser", "main"]
