import sys

from fod_forge.cli import main

if __name__ == "__main__":
    sys.exit(main())
