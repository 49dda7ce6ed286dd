"""Central finite-difference verification of reverse-mode gradients.

Coordinates are excluded from the comparison when

* the +eps or -eps evaluation takes a different discrete branch than the
  unperturbed one (a select/clamp/relu mask flips, or a min/max moves to
  another index), or
* both the autodiff and the central-difference derivative sit below the
  rounding floor of the difference quotient, ``64 * eps_mach * (|f| + 1) / eps``,
  where the relative error is meaningless.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward, no_grad, precision, record_decisions


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_branch: int
    skipped_floor: int
    worst_index: int | None = None

    def passed(self, tol):
        return self.checked > 0 and self.max_rel_error <= tol


def gradient_check(f, x, eps=1e-4, max_coords=None, rng=None):
    """Compare ``backward`` of scalar ``f(x)`` against central differences.

    ``max_coords`` limits the check to a random subset of coordinates.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(x0.copy(), requires_grad=True)
        with record_decisions() as base_trace:
            y = f(xt)
        fx = float(y.data)
        backward(y)
        auto = np.zeros_like(x0) if xt.grad is None else xt.grad.astype(np.float64)

        coords = np.arange(x0.size)
        if max_coords is not None and max_coords < x0.size:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(x0.size, size=max_coords, replace=False))

        floor = 64 * np.finfo(np.float64).eps * (abs(fx) + 1) / eps
        worst, worst_i = 0.0, None
        checked = skipped_branch = skipped_floor = 0
        flat = x0.reshape(-1)
        for i in coords:
            vals = []
            same = True
            for sgn in (1, -1):
                xp = flat.copy()
                xp[i] += sgn * eps
                with no_grad(), record_decisions() as trace:
                    vals.append(float(f(Tensor(xp.reshape(x0.shape))).data))
                same &= trace == base_trace
            if not same:
                skipped_branch += 1
                continue
            fd = (vals[0] - vals[1]) / (2 * eps)
            a = auto.reshape(-1)[i]
            if abs(fd) < floor and abs(a) < floor:
                skipped_floor += 1
                continue
            err = abs(a - fd) / (abs(fd) + 1e-12)
            checked += 1
            if err > worst:
                worst, worst_i = err, int(i)
    return GradCheckResult(worst, checked, skipped_branch, skipped_floor, worst_i)


def finite_diff_check(f, x, eps=1e-4, **kw):
    """Max relative error between autodiff and central differences."""
    return gradient_check(f, x, eps=eps, **kw).max_rel_error
