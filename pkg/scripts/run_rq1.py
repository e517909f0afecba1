#!/usr/bin/env python3
"""Run the binarization comparison at full scale and print the table.

Equivalent to `uplift-mtd rq1 ...`; kept as a script so the default
invocation is copy-pasteable:

    python3 scripts/run_rq1.py --out runs/
"""

import sys

from uplift_mtd.cli import main

if __name__ == "__main__":
    sys.exit(main(["rq1", *sys.argv[1:]]))
