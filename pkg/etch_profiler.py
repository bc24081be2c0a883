"""
Etch profile prediction pipeline

Conditions multichannel in-situ etch signals (process parameters and OES),
reprograms them onto a frozen transformer backbone and regresses the
89-point wafer etch-depth profile as a zero-mean shape plus a mean level.
Ships a synthetic dataset generator and a lot-wise cross-validation harness.

Usage:
    python etch_profiler.py gen --out data/
    python etch_profiler.py cv data/ --k 9 --out runs/cv
    python etch_profiler.py gradcheck --coords 500

You can use a .env file for the ETCH_* settings - see load_env.py

License: MIT
"""

import sys

# Try to load from .env file if it exists
try:
    from load_env import load_env
    load_env()
except ImportError:
    pass  # load_env.py is optional

from cli.commands import main


if __name__ == "__main__":
    sys.exit(main())
