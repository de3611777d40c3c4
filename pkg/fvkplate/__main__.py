"""Entry point: python -m fvkplate"""

import sys

from .config import prescan_threads

# BLAS reads its thread count when numpy is first imported
prescan_threads(sys.argv[1:])

from .cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
