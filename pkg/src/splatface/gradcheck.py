"""Central finite-difference checking of analytic gradients.

Run with float64 parameters; float32 leaves too little headroom between
truncation and roundoff error for a 1e-4 relative tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float = 0.0
    tolerance: float = 1e-4
    worst: str = ""
    per_param: dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return f"grad_check {verdict}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:.1e}) at {self.worst}"


def _rel_err(a, f):
    # Floor the denominator so near-zero gradients are compared absolutely.
    return abs(a - f) / max(abs(a) + abs(f), 1e-3)


def grad_check(f, params, tolerance=1e-4, step=1e-5, max_coords_per_param=24,
               rng=None) -> GradCheckReport:
    """Compare analytic gradients of the scalar `f()` against central FD.

    `f` must rebuild its graph from `params` on every call.  Large parameters
    are checked on a seeded random subset of coordinates.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params ({p.name or 'unnamed'})")
        p.grad = None
    out = f()
    out.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tolerance=tolerance)
    for pi, p in enumerate(params):
        a = analytic[pi]
        if a is None:
            a = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        worst_here = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = f().item()
            flat[c] = orig - step
            fm = f().item()
            flat[c] = orig
            fd = (fp - fm) / (2.0 * step)
            err = _rel_err(a.reshape(-1)[c], fd)
            if err > worst_here:
                worst_here = err
            if err > report.max_rel_err:
                report.max_rel_err = err
                report.worst = f"{p.name or f'param{pi}'}[{c}] analytic={a.reshape(-1)[c]:.6g} fd={fd:.6g}"
        report.per_param[p.name or f"param{pi}"] = worst_here
    return report


def to_float64(params):
    """In-place promotion of parameter tensors to float64 for checking."""
    for p in params:
        p.data = p.data.astype(np.float64)
        p.grad = None
    return params
