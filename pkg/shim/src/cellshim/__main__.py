import sys

from cellshim import main

if __name__ == "__main__":
    sys.exit(main())
