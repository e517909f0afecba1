#!/usr/bin/env python3
"""Run the timing-ablation comparison on the time-sensitive suite.

Equivalent to `uplift-mtd rq2 ...`:

    python3 scripts/run_rq2.py --out runs/
"""

import sys

from uplift_mtd.cli import main

if __name__ == "__main__":
    sys.exit(main(["rq2", *sys.argv[1:]]))
