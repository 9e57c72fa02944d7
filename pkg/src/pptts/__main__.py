"""Allow ``python3 -m pptts`` as an alias for the ``pptts`` entry point."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
