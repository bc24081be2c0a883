"""
Core modules for etch profile prediction
"""

from .config import Config
from .errors import ConfigError, EtchProfilerError
from .processor import PipelineProcessor, RunManifest
from .utils import directory_checksum, ensure_dir, format_mean_std
from .logger import PipelineLogger

__all__ = [
    'Config',
    'ConfigError',
    'EtchProfilerError',
    'PipelineProcessor',
    'RunManifest',
    'directory_checksum',
    'ensure_dir',
    'format_mean_std',
    'PipelineLogger',
]
