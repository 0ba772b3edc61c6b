"""
Entry point for running the toolkit as a module.

    python -m bt_robustness evaluate --corpus run.jsonl
"""

import sys

from .main import main

if __name__ == "__main__":
    sys.exit(main())
