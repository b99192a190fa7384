"""Allow `python -m attn2d` alongside the `attn2d` console script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
