"""Allow ``python -m apcms`` as an alias for the ``apcms`` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
