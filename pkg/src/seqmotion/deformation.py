"""Diffeomorphic deformation algebra on 2-d grids.

Velocity fields and deformation fields are arrays of shape ``[2, H, W]``
(or batched ``[N, 2, H, W]``): channel 0 holds row coordinates, channel 1
column coordinates, both in pixel units. A deformation field stores the
absolute sampling position per output pixel, so the identity field maps
every pixel to itself and composition is a plain resample. Physical
spacing (mm per pixel) only enters when converting smoothing widths; it
is carried by the image sequence, not by the field arrays.

All operations except ``jacobian_determinant`` and nearest-neighbour
warping are differentiable engine ops.
"""

from __future__ import annotations

import logging
from functools import lru_cache

import numpy as np

from . import kernels
from .engine import Tensor, apply_matrix, as_tensor, grid_sample, mul

log = logging.getLogger(__name__)

DEFAULT_EXP_STEPS = 6
DEFAULT_SPACING_MM = 1.5
# scaling-and-squaring stays accurate while the scaled field is sub-half-pixel
MAX_SCALED_STEP_PX = 0.5


@lru_cache(maxsize=16)
def _identity(h: int, w: int, dtype: str) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([rows, cols]).astype(dtype)


def identity_grid(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Identity deformation field ``[2, H, W]``."""
    return _identity(h, w, np.dtype(dtype).name).copy()


def _batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.data.ndim == 3:
        return t.reshape((1,) + t.data.shape), True
    if t.data.ndim != 4:
        raise ValueError(f"expected [2,H,W] or [N,2,H,W] field, got shape {t.data.shape}")
    return t, False


def compose(phi_a: Tensor, phi_b: Tensor) -> Tensor:
    """(phi_a o phi_b)(x) = phi_a(phi_b(x)), bilinear with border clamp."""
    phi_a, phi_b = as_tensor(phi_a), as_tensor(phi_b)
    if phi_a.data.shape != phi_b.data.shape:
        raise ValueError(
            f"compose: grids differ, {phi_a.data.shape} vs {phi_b.data.shape}")
    a, squeezed = _batched(phi_a)
    b, _ = _batched(phi_b)
    out = grid_sample(a, b)
    return out.reshape(phi_a.data.shape) if squeezed else out


def exponentiate(v: Tensor, steps: int = DEFAULT_EXP_STEPS) -> Tensor:
    """Group exponential of a stationary velocity field by scaling and squaring.

    The field is scaled by ``2**-steps``, added to the identity, then
    self-composed ``steps`` times. Differentiable end to end.
    """
    v = as_tensor(v)
    if steps < 1:
        raise ValueError(f"exponentiate: steps must be >= 1, got {steps}")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("exponentiate: velocity field contains non-finite values")
    vmax = float(np.max(np.abs(v.data))) if v.data.size else 0.0
    if vmax / 2.0 ** steps >= MAX_SCALED_STEP_PX:
        log.warning("exponentiate: max|v|=%.2f px exceeds the %.1f px scaled-step bound "
                    "for %d squarings; accuracy degrades", vmax, MAX_SCALED_STEP_PX, steps)
    vb, squeezed = _batched(v)
    n, _, h, w = vb.data.shape
    ident = _identity(h, w, vb.data.dtype.name)[None]
    phi = mul(vb, 1.0 / 2.0 ** steps) + ident
    for _ in range(steps):
        phi = grid_sample(phi, phi)
    return phi.reshape(v.data.shape) if squeezed else phi


def invert(v: Tensor, steps: int = DEFAULT_EXP_STEPS) -> Tensor:
    """exp(-v): inverse of exp(v) up to discretization."""
    return exponentiate(mul(as_tensor(v), -1.0), steps)


def warp(image, phi, mode: str = "bilinear"):
    """Resample ``image`` at the positions given by ``phi``.

    ``image`` is ``[H,W]`` or ``[N,C,H,W]``; bilinear warping is
    differentiable in both arguments, nearest (for label masks) is a
    plain numpy operation.
    """
    phi = as_tensor(phi)
    img = as_tensor(image)
    single = img.data.ndim == 2
    imgb = img.reshape((1, 1) + img.data.shape) if single else img
    phib, _ = _batched(phi)
    if imgb.data.shape[0] != phib.data.shape[0] or imgb.data.shape[2:] != phib.data.shape[2:]:
        raise ValueError(f"warp: image grid {img.data.shape} does not match field "
                         f"{phi.data.shape}")
    if mode == "bilinear":
        out = grid_sample(imgb, phib)
        return out.reshape(img.data.shape) if single else out
    if mode == "nearest":
        out = kernels.gather_nearest(np.asarray(imgb.data, dtype=np.float64),
                                     phib.data[:, 0], phib.data[:, 1])
        return Tensor(out.reshape(img.data.shape) if single else out)
    raise ValueError(f"warp: unknown mode {mode!r}")


def jacobian_determinant(phi: np.ndarray) -> np.ndarray:
    """Determinant of the per-pixel Jacobian of a deformation field.

    Central differences in the interior, one-sided at the borders.
    Accepts ``[2,H,W]`` or ``[N,2,H,W]``; returns ``[H,W]`` or ``[N,H,W]``.
    """
    phi = np.asarray(phi.data if isinstance(phi, Tensor) else phi)
    single = phi.ndim == 3
    if single:
        phi = phi[None]
    drr = np.gradient(phi[:, 0], axis=1)
    drc = np.gradient(phi[:, 0], axis=2)
    dcr = np.gradient(phi[:, 1], axis=1)
    dcc = np.gradient(phi[:, 1], axis=2)
    det = drr * dcc - drc * dcr
    return det[0] if single else det


def displacement(phi: np.ndarray) -> np.ndarray:
    """phi - identity, in pixels."""
    phi = np.asarray(phi.data if isinstance(phi, Tensor) else phi)
    single = phi.ndim == 3
    if single:
        phi = phi[None]
    ident = _identity(phi.shape[2], phi.shape[3], phi.dtype.name)[None]
    u = phi - ident
    return u[0] if single else u


@lru_cache(maxsize=32)
def _gaussian_matrix(length: int, sigma: float, dtype: str) -> np.ndarray:
    """Border-replicated Gaussian smoothing as an explicit [L, L] matrix.

    Taps are truncated at 4 sigma and renormalized to unit sum, so
    constant inputs pass through unchanged.
    """
    radius = int(np.ceil(4.0 * sigma))
    k = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (k / sigma) ** 2)
    g /= g.sum()
    s = np.zeros((length, length))
    for i in range(length):
        for tap, weight in zip(k, g):
            s[i, min(max(i + tap, 0), length - 1)] += weight
    return s.astype(dtype)


def smooth_spatial(v: Tensor, sigma_mm: float,
                   spacing_mm: float = DEFAULT_SPACING_MM) -> Tensor:
    """Separable Gaussian over the last two axes; width given in mm."""
    v = as_tensor(v)
    if sigma_mm <= 0:
        raise ValueError(f"smooth_spatial: sigma must be positive, got {sigma_mm}")
    sigma_px = float(sigma_mm) / float(spacing_mm)
    h, w = v.data.shape[-2:]
    dt = v.data.dtype.name
    out = apply_matrix(v, _gaussian_matrix(h, sigma_px, dt), axis=v.data.ndim - 2)
    return apply_matrix(out, _gaussian_matrix(w, sigma_px, dt), axis=v.data.ndim - 1)


def smooth_temporal(stack: Tensor, sigma_frames: float) -> Tensor:
    """1-d Gaussian along axis 0 (time) with replicated ends."""
    stack = as_tensor(stack)
    if sigma_frames <= 0:
        raise ValueError(f"smooth_temporal: sigma must be positive, got {sigma_frames}")
    t = stack.data.shape[0]
    if t == 1:
        return stack
    return apply_matrix(stack, _gaussian_matrix(t, float(sigma_frames), stack.data.dtype.name),
                        axis=0)
