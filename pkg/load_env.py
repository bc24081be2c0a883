"""
Load ETCH_* settings from a .env file

Usage:
    from load_env import load_env
    load_env()
"""

import os
from pathlib import Path
from typing import Dict

from core.logger import get_logger

logger = get_logger('env')


def parse_env_file(env_file: str) -> Dict[str, str]:
    """KEY=VALUE pairs of an env file; blank lines, comments and quotes handled."""
    values: Dict[str, str] = {}
    with open(env_file, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith('#') or '=' not in line:
                continue
            key, value = line.split('=', 1)
            key, value = key.strip(), value.strip()
            if key.startswith('export '):
                key = key[len('export '):].strip()
            if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
                value = value[1:-1]
            if key:
                values[key] = value
    return values


def load_env(env_file: str = '.env', override: bool = False) -> Dict[str, str]:
    """
    Set environment variables from env_file.

    Args:
        env_file: Path to .env file (default: .env)
        override: Replace variables already present in the environment

    Returns:
        The variables that were set (empty when the file does not exist)
    """
    if not Path(env_file).exists():
        return {}

    applied = {}
    for key, value in parse_env_file(env_file).items():
        if override or key not in os.environ:
            os.environ[key] = value
            applied[key] = value
    logger.debug(f"Loaded {len(applied)} settings from {env_file}: {', '.join(sorted(applied))}")
    return applied
