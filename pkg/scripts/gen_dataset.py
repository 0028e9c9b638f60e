#!/usr/bin/env python3
"""Generate a synthetic oracle dataset (wrapper around `splatface gen-data`)."""

import sys

from splatface.cli import main

if __name__ == "__main__":
    sys.exit(main(["gen-data"] + sys.argv[1:]))
