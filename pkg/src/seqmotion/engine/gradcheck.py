"""Central finite-difference gradient checking.

Used by the test suite and by ``seqmotion selftest``. The check must run
in float64: the step of 1e-5 drowns in float32 rounding.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_gradient(f, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``t``."""
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Infinity-norm error normalized by the larger gradient magnitude."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_gradients(build, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Worst relative error across ``inputs`` for the scalar graph ``build()``.

    ``build`` must construct the graph from the current ``.data`` of the
    inputs each time it is called (it is re-run for every probe).
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks must run in float64")
        t.requires_grad = True
        t.grad = None
    loss = build()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(lambda: build().item(), t, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
