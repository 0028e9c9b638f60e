#!/usr/bin/env python3
"""Run the three training stages back to back with checkpoint chaining.

    python scripts/train_all.py --data data --out runs [extra train flags...]

Extra flags are forwarded to every `splatface train` invocation.
"""

import argparse
import sys

from splatface.cli import main


def run(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--out", default="runs", help="run output directory")
    args, extra = p.parse_known_args(argv)

    prev = None
    for stage in ("neutral", "emotion", "stylization"):
        cmd = ["train", "--stage", stage, "--data", args.data,
               "--out", args.out] + extra
        if prev:
            cmd += ["--init-from", prev]
        code = main(cmd)
        if code != 0:
            return code
        prev = f"{args.out}/{stage}.esgc"
    return 0


if __name__ == "__main__":
    sys.exit(run())
