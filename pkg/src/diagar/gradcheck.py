"""Finite-difference gradient verification.

The oracle is a central difference: (f(x + h e_i) - f(x - h e_i)) / 2h,
evaluated coordinate by coordinate with no tape active, compared against
the tape's analytic gradient.  Checks should run in float64 (build the
leaf tensors with dtype=np.float64); at h = 1e-5 the truncation plus
round-off error sits far below the 1e-6 relative tolerance used by the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class GradCheckReport:
    """Per-parameter worst relative errors and the overall maximum."""

    per_param: dict[str, float]
    max_relative_error: float

    def ok(self, tol: float) -> bool:
        return self.max_relative_error < tol


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(1, |a_i|, |n_i|).

    The unit floor makes the comparison absolute for near-zero entries,
    where a pure ratio would amplify round-off noise.
    """
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_grad(
    fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar fn() w.r.t. one parameter."""
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn().item()
        flat[i] = orig - step
        down = fn().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def gradcheck(
    fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare the taped gradient of scalar fn() to finite differences.

    `fn` must rebuild its graph on every call from the live `params`
    data (the checker perturbs the arrays in place).
    """
    for name, p in params:
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} does not require grad")
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss, params=[p for _, p in params])
    report: dict[str, float] = {}
    worst = 0.0
    for name, p in params:
        analytic = np.asarray(p.grad, dtype=np.float64)
        numeric = finite_difference_grad(fn, p, step=step)
        err = _relative_error(analytic, numeric)
        report[name] = err
        worst = max(worst, err)
    return GradCheckReport(report, worst)
