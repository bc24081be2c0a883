"""
Command-line interface for running the pipeline
"""

from .commands import EtchProfilerCli, main

__all__ = ['EtchProfilerCli', 'main']
