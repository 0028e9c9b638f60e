#!/usr/bin/env python3
"""Finite-difference gradient report for every differentiable component.

Builds a small float64 model, runs the full per-stage loss chains, and prints
a per-parameter worst relative error table.  Exit code 0 iff every check is
within tolerance.
"""

import sys
import time

import numpy as np

from splatface.gradcheck import grad_check


def run():
    sys.path.insert(0, "tests")
    from test_acceptance import build_small_float64_model, stage_loss_fn

    model, scene = build_small_float64_model(seed=0)
    t0 = time.perf_counter()
    ok = True
    for stage in ("neutral", "emotion", "stylization"):
        f = stage_loss_fn(model, scene, stage)
        report = grad_check(f, model.parameters(), max_coords_per_param=8)
        print(f"[{stage}] {report}")
        for name, err in sorted(report.per_param.items()):
            print(f"    {name:40s} {err:.3e}")
        ok = ok and report.passed
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(run())
