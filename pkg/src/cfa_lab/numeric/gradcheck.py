"""Finite-difference verification of reverse-mode gradients.

The check promotes the probed grid to float64 and reruns the caller's
function through the same op implementations at that precision; float32
rounding noise would otherwise dominate the comparison long before the
1e-3 tolerance is reached.  Non-scalar outputs are reduced with a fixed
pseudorandom projection so that per-element gradient errors cannot
cancel across output positions.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .grid import Grid, mul, sum_all

DEFAULT_EPS = 1e-3
_PROJECTION_SEED = 0x5EED


def _project(out: Grid, weights: np.ndarray) -> float:
    return float((out.values * weights).sum())


def grad_check(fn: Callable[[Grid], Grid], x: Grid, eps: float = DEFAULT_EPS) -> float:
    """Return the max relative error between analytic and numeric gradients.

    fn  : maps a Grid to a Grid of any shape
    x   : point at which to check; not modified
    The relative error for one element uses the denominator
    max(|analytic|, |numeric|, 1e-6).
    """
    base = x.values.astype(np.float64)

    probe = Grid(base.copy(), requires_grad=True, dtype=np.float64)
    out = fn(probe)
    rng = np.random.default_rng(_PROJECTION_SEED)
    weights = rng.standard_normal(out.shape).astype(np.float64)
    loss = sum_all(mul(out, Grid(weights, dtype=np.float64)))
    loss.backward()
    analytic = probe.grad
    if analytic is None:
        raise AssertionError("grad_check: no gradient reached the probed grid")
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = _project(fn(Grid(base.copy(), dtype=np.float64)), weights)
        flat[i] = saved - eps
        f_minus = _project(fn(Grid(base.copy(), dtype=np.float64)), weights)
        flat[i] = saved
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))
