"""Command-line entry point and run configuration."""

from .config import ConfigError, RunConfig, default_config, load_config
from .main import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, main

__all__ = ["ConfigError", "EXIT_FAILURE", "EXIT_OK", "EXIT_USAGE", "RunConfig", "build_parser",
           "default_config", "load_config", "main"]
