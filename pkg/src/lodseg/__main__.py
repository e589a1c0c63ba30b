"""Allow `python -m lodseg` as an alias for the `lodseg` console script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
