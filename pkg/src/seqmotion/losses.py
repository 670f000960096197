"""Training objective: symmetric local cross-correlation and KL terms.

The image likelihood is a Boltzmann distribution over the symmetric local
cross-correlation: both images travel half the deformation path
(``exp(+v/2)`` and ``exp(-v/2)``), windows are mean-centered, and the
squared normalized correlation is averaged over pixels, giving a value in
[0, 1]. The weighting factor ``lam`` scales it against the closed-form KL
divergence to the unit Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .deformation import exponentiate
from .engine import (Tensor, as_tensor, box_filter2d, clamp_max, clamp_min,
                     concat, div, exp, grid_sample, mean, mul, square, sum_)

LCC_EPS = 1e-5
DEFAULT_WINDOW = 9


@dataclass
class LatentGaussian:
    """Per-time-step diagonal Gaussian: mean and log-variance, each [T, d]."""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        self.mu = as_tensor(self.mu)
        self.logvar = as_tensor(self.logvar)
        if self.mu.data.shape != self.logvar.data.shape:
            raise ValueError(f"LatentGaussian: mean shape {self.mu.data.shape} "
                             f"!= log-variance shape {self.logvar.data.shape}")

    @property
    def steps(self) -> int:
        return self.mu.data.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.data.shape[-1]


def kl_to_unit_gaussian(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis.

    0.5 * sum_i (mu_i^2 + sigma_i^2 - 1 - log sigma_i^2); zero exactly at
    the prior.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    terms = square(mu) + exp(logvar) - 1.0 - logvar
    return mul(sum_(terms, axis=mu.data.ndim - 1), 0.5)


@lru_cache(maxsize=8)
def _window_counts(h: int, w: int, radius: int, dtype: str) -> np.ndarray:
    ones = np.ones((1, 1, h, w), dtype=dtype)
    from .engine.ops import _box1d
    return _box1d(_box1d(ones, radius, 2), radius, 3)


def lcc_half_warped(a: Tensor, b: Tensor, window: int = DEFAULT_WINDOW,
                    eps: float = LCC_EPS) -> Tensor:
    """Mean squared local NCC between two already-warped stacks [T,1,H,W].

    Window statistics use truncated (zero-padded) box sums with per-window
    counts, so border windows are averaged over their actual support. A
    window with (near) zero variance contributes 0 through the ``eps``
    floor in the denominator.
    """
    t, _, h, w = a.data.shape
    r = window // 2
    counts = _window_counts(h, w, r, a.data.dtype.name)
    stats = box_filter2d(concat([a, b, mul(a, a), mul(b, b), mul(a, b)], axis=1), r)
    s_a, s_b = stats[:, 0:1], stats[:, 1:2]
    s_aa, s_bb, s_ab = stats[:, 2:3], stats[:, 3:4], stats[:, 4:5]
    cross = s_ab - div(mul(s_a, s_b), counts)
    var_a = clamp_min(s_aa - div(square(s_a), counts), 0.0)
    var_b = clamp_min(s_bb - div(square(s_b), counts), 0.0)
    cc = clamp_max(div(square(cross), clamp_min(mul(var_a, var_b), eps)), 1.0)
    return mean(cc, axis=(1, 2, 3))


def symmetric_lcc_sequence(i0: np.ndarray, fixed: np.ndarray, v: Tensor,
                           window: int = DEFAULT_WINDOW, exp_steps: int = 6,
                           eps: float = LCC_EPS) -> Tensor:
    """Per-frame symmetric LCC for a whole sequence; returns Tensor [T].

    ``i0`` is the moving frame [H,W], ``fixed`` the stack [T,H,W] and ``v``
    the velocity fields [T,2,H,W]. Both half-deformations for all frames
    are exponentiated as one batch.
    """
    v = as_tensor(v)
    t = v.data.shape[0]
    if window % 2 == 0 or window < 1:
        raise ValueError(f"symmetric_lcc: window must be odd, got {window}")
    if fixed.shape != (t,) + i0.shape:
        raise ValueError(f"symmetric_lcc: fixed stack {fixed.shape} does not match "
                         f"moving frame {i0.shape} over {t} steps")
    halves = concat([mul(v, 0.5), mul(v, -0.5)], axis=0)
    phi = exponentiate(halves, exp_steps)
    dtype = v.data.dtype
    moving = Tensor(np.broadcast_to(i0.astype(dtype), (t, 1) + i0.shape).copy())
    fixed_t = Tensor(fixed.astype(dtype)[:, None])
    warped_a = grid_sample(moving, phi[:t])
    warped_b = grid_sample(fixed_t, phi[t:])
    return lcc_half_warped(warped_a, warped_b, window, eps)


def symmetric_lcc(i0: np.ndarray, it: np.ndarray, v: Tensor,
                  window: int = DEFAULT_WINDOW, exp_steps: int = 6,
                  eps: float = LCC_EPS) -> Tensor:
    """Scalar symmetric LCC between one image pair under velocity ``v``."""
    v = as_tensor(v)
    vb = v.reshape((1,) + v.data.shape) if v.data.ndim == 3 else v
    out = symmetric_lcc_sequence(np.asarray(i0), np.asarray(it)[None], vb,
                                 window, exp_steps, eps)
    return out.reshape(())


def elbo_objective(recon_lcc: Tensor, q: LatentGaussian, lam: float) -> Tensor:
    """Training loss: sum_t ( -lam * lcc_t + KL_t ). Minimized."""
    if lam <= 0:
        raise ValueError(f"elbo_objective: lam must be positive, got {lam}")
    kl_t = kl_to_unit_gaussian(q.mu, q.logvar)
    return sum_(mul(recon_lcc, -float(lam))) + sum_(kl_t)
