import sys

from ura_feedback.cli import main

if __name__ == "__main__":
    sys.exit(main())
