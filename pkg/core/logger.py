"""
Logging utility for the pipeline
"""

import os
import logging
from typing import Optional

LOGGER_NAME = 'etch_profiler'


def get_logger(module: str) -> logging.Logger:
    """Child logger for a pipeline module, e.g. get_logger('conditioning')."""
    return logging.getLogger(f"{LOGGER_NAME}.{module}")


class PipelineLogger:
    """Logger for pipeline runs with optional file logging."""

    def __init__(self, log_file: Optional[str] = None, enable_file_logging: bool = False,
                 verbose: bool = False):
        """
        Initialize logger.

        Args:
            log_file: Path to log file (optional, defaults to pipeline.log under ~/.etch_profiler)
            enable_file_logging: Whether to enable file logging
            verbose: Show debug messages (per-epoch losses) on the console
        """
        self.logger = logging.getLogger(LOGGER_NAME)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False

        # Clear existing handlers
        self.logger.handlers.clear()

        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
        console_handler.setFormatter(logging.Formatter('%(message)s'))
        self.logger.addHandler(console_handler)

        if enable_file_logging or log_file:
            if not log_file:
                log_dir = os.path.expanduser('~/.etch_profiler')
                os.makedirs(log_dir, exist_ok=True)
                log_file = os.path.join(log_dir, 'pipeline.log')

            log_dir = os.path.dirname(log_file)
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)

            file_handler = logging.FileHandler(log_file, mode='a', encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter(
                '%(asctime)s - %(levelname)s - %(name)s - %(message)s',
                datefmt='%Y-%m-%d %H:%M:%S'
            ))
            self.logger.addHandler(file_handler)

            self.log_file = log_file
            self.logger.debug(f"Logging to file: {log_file}")
        else:
            self.log_file = None
