#!/usr/bin/env python3
"""Temporal-shift evaluation: train on era A, test on era B, 10 runs per
model kind. Writes the full report bundle to results/temporal-shift.

Extra CLI flags pass through, e.g. --jobs 4 --force or --out elsewhere.
"""

import sys

from dklshift.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "--config", "temporal-shift", "--out", "results/temporal-shift", *sys.argv[1:]]))
