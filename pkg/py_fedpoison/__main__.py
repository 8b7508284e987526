"""Allow ``python -m py_fedpoison``."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
