"""Median refinement and full pose-estimation latency for M = 512 and 1024.

    python scripts/bench.py [--config CFG] [--runs 10]
"""

import sys

from prgcn.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench", *sys.argv[1:]]))
