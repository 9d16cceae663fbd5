#!/usr/bin/env python3
"""Smoke test: one tiny run end to end (small cohort, 2 epochs) to verify
the pipeline works. Finishes in well under a minute.

Extra CLI flags pass through, e.g. --force or --out elsewhere.
"""

import sys

from dklshift.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "--config", "smoke", "--out", "results/smoke", *sys.argv[1:]]))
