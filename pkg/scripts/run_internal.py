#!/usr/bin/env python3
"""Internal (no-shift) control: train and test inside era A, 10 runs per
model kind. Writes the full report bundle to results/internal.

Extra CLI flags pass through, e.g. --jobs 4 --force or --out elsewhere.
"""

import sys

from dklshift.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "--config", "internal", "--out", "results/internal", *sys.argv[1:]]))
