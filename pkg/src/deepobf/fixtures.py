"""``python -m deepobf.fixtures``: recompute the embedded table fixtures; exit 1 if any cell is off."""

import sys

from .evaluation import fixture_report


def main() -> int:
    text, ok = fixture_report()
    sys.stdout.write(text)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
