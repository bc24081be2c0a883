"""
Utility functions for the pipeline
"""

import os
import json
import hashlib
import subprocess
from datetime import datetime, timezone

__version__ = '0.3.0'


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    """Format a cross-validation aggregate as 'mean ± std'."""
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def ensure_dir(path: str) -> str:
    """Create an output directory (and its parents) and return it."""
    if path:
        os.makedirs(path, exist_ok=True)
    return path


def directory_checksum(root: str, exclude=(), chunk_size: int = 1 << 16) -> str:
    """
    SHA-256 over every file under root, visited in sorted order. Each file
    contributes its root-relative POSIX path and byte length ahead of its
    content, so renames and moves change the checksum as well as edits.
    Files named in exclude are skipped wherever they appear.
    """
    digest = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name in exclude:
                continue
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root).replace(os.sep, '/')
            digest.update(f"{rel}\0{os.path.getsize(path)}\0".encode('utf-8'))
            with open(path, 'rb') as f:
                for chunk in iter(lambda: f.read(chunk_size), b''):
                    digest.update(chunk)
    return digest.hexdigest()


def describe_version() -> str:
    """`git describe` of the source tree when available, else the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ['git', 'describe', '--always', '--dirty', '--tags'],
            cwd=here, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


def write_json(path: str, payload) -> str:
    """Write payload as indented JSON, creating parent directories."""
    ensure_dir(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=False, default=_json_default)
        f.write('\n')
    return path


def read_json(path: str):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _json_default(value):
    # numpy scalars/arrays and sets
    if hasattr(value, 'tolist'):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
