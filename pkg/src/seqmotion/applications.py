"""Downstream procedures on top of a trained model.

Everything here consumes and produces plain numpy arrays; the engine
graph is only built internally. Tracking is reconstruction with every
frame observed, and motion transport reuses the exact decode pipeline of
tracking, so the documented bit-exact identities hold by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import kernels
from .deformation import displacement, exponentiate, identity_grid, jacobian_determinant
from .engine import ParamStore, Tensor
from .losses import LatentGaussian
from .networks import (ModelConfig, decode_columns, encode_pairs, model_forward,
                       normalized_times, temporal_regularize)
from .deformation import smooth_temporal
from .sequence import ImageSequence

log = logging.getLogger(__name__)


class ModelStateError(RuntimeError):
    """Operation refused because the model state is unsuitable."""


@dataclass
class TrackingResult:
    """Deformations, velocities and the motion matrix for one sequence."""

    deformations: np.ndarray        # [T, 2, H, W], target -> moving sampling map
    velocities: np.ndarray          # [T, 2, H, W]
    z: np.ndarray                   # motion matrix [d, T]
    spacing_mm: float = 1.5
    mu: np.ndarray | None = None    # encoder stats for observed pairs
    logvar: np.ndarray | None = None
    observed: tuple = field(default=())

    @property
    def steps(self) -> int:
        return self.deformations.shape[0]


def _require_trained(params: ParamStore, allow_untrained: bool, what: str) -> None:
    if params.step == 0 and not allow_untrained:
        raise ModelStateError(f"{what}: parameters carry no training steps; "
                              "pass allow_untrained=True to override")


def _decode_pipeline(z: Tensor, moving: np.ndarray, params: ParamStore,
                     cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """decode -> temporal smoothing -> exponentiation; shared by all paths."""
    v = smooth_temporal(decode_columns(z, moving, params, cfg), cfg.sigma_t_frames)
    phi = exponentiate(v, cfg.exp_steps)
    return v.data, phi.data


def reconstruct(seq: ImageSequence, observed, params: ParamStore, cfg: ModelConfig,
                mode: str = "mean", rng=None, allow_untrained: bool = False) -> TrackingResult:
    """Registration from a subset of observed frames.

    ``observed`` indexes frames that may be read (0, the moving frame,
    must be included). Observed steps use the encoder's predicted mean;
    missing steps take a unit-Gaussian draw in ``stochastic`` mode or the
    prior mean (zeros) in ``mean`` mode. Unobserved frames are never read.
    """
    _require_trained(params, allow_untrained, "reconstruct")
    t = seq.steps
    obs = sorted(set(int(i) for i in observed))
    if not obs or obs[0] != 0:
        raise ValueError("reconstruct: the observed set must contain frame 0")
    if obs[-1] > t:
        raise ValueError(f"reconstruct: observed index {obs[-1]} exceeds T={t}")
    if mode not in ("mean", "stochastic"):
        raise ValueError(f"reconstruct: unknown mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise ValueError("reconstruct: stochastic mode needs an rng")

    dt = np.dtype(cfg.dtype)
    latents = np.zeros((t, cfg.latent_dim), dt)
    if mode == "stochastic":
        latents[:] = rng.standard_normal((t, cfg.latent_dim)).astype(dt)
    obs_steps = [i for i in obs if i >= 1]
    mu = logvar = None
    if obs_steps:
        q = encode_pairs(seq.moving, seq.frames[obs_steps], params, cfg)
        mu, logvar = q.mu.data, q.logvar.data
        for row, step_idx in enumerate(obs_steps):
            latents[step_idx - 1] = mu[row]
    z = temporal_regularize(Tensor(latents), normalized_times(t, cfg.dtype), params, cfg)
    v, phi = _decode_pipeline(z, seq.moving, params, cfg)
    return TrackingResult(deformations=phi, velocities=v, z=z.data,
                          spacing_mm=seq.spacing_mm, mu=mu, logvar=logvar,
                          observed=tuple(obs))


def track(seq: ImageSequence, params: ParamStore, cfg: ModelConfig,
          allow_untrained: bool = False) -> TrackingResult:
    """Full-sequence registration: reconstruction with every frame observed."""
    return reconstruct(seq, range(seq.steps + 1), params, cfg, mode="mean",
                       allow_untrained=allow_untrained)


def simulate(moving: np.ndarray, t: int, params: ParamStore, cfg: ModelConfig,
             rng, allow_untrained: bool = False) -> TrackingResult:
    """Motion simulation from the moving frame alone: prior draws at every step."""
    frames = np.zeros((t + 1,) + moving.shape, np.float32)
    frames[0] = moving
    seq = ImageSequence(frames, cfg.spacing_mm)
    return reconstruct(seq, [0], params, cfg, mode="stochastic", rng=rng,
                       allow_untrained=allow_untrained)


def transport(z: np.ndarray, target_moving: np.ndarray, params: ParamStore,
              cfg: ModelConfig, spacing_mm: float = 1.5,
              allow_untrained: bool = False) -> TrackingResult:
    """Decode a motion matrix on another subject's moving frame.

    No inter-subject registration happens; the decoder's conditioning on
    the target frame adapts the deformations.
    """
    _require_trained(params, allow_untrained, "transport")
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] != cfg.latent_dim:
        raise ValueError(f"transport: motion matrix shape {z.shape} does not match "
                         f"encoding size d={cfg.latent_dim}")
    v, phi = _decode_pipeline(Tensor(z.astype(cfg.dtype)), target_moving, params, cfg)
    return TrackingResult(deformations=phi, velocities=v, z=z.copy(),
                          spacing_mm=spacing_mm)


def compensate(seq: ImageSequence, tr: TrackingResult,
               exp_steps: int = 6) -> ImageSequence:
    """Warp each fixed frame back to the moving frame with exp(-v_t)."""
    if tr.steps != seq.steps:
        raise ValueError(f"compensate: tracking has {tr.steps} steps, sequence {seq.steps}")
    phi_inv = exponentiate(Tensor(-tr.velocities), exp_steps).data
    warped = kernels.gather_bilinear(seq.fixed[:, None].astype(phi_inv.dtype),
                                     phi_inv[:, 0], phi_inv[:, 1])[:, 0]
    frames = np.concatenate([seq.moving[None], warped]).astype(np.float32)
    return ImageSequence(frames, seq.spacing_mm)


def warp_mask(mask: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Bilinear warp of a boolean mask's indicator, thresholded at 0.5."""
    ind = mask.astype(phi.dtype)
    n = phi.shape[0]
    warped = kernels.gather_bilinear(np.broadcast_to(ind, (n, 1) + ind.shape).copy(),
                                     phi[:, 0], phi[:, 1])[:, 0]
    return warped >= 0.5


def volume_curve(mask0: np.ndarray, tr: TrackingResult) -> np.ndarray:
    """Area (mm^2) of the warped moving-frame mask, per frame incl. frame 0."""
    mask0 = np.asarray(mask0).astype(bool)
    area_scale = tr.spacing_mm ** 2
    if not mask0.any():
        log.warning("volume_curve: empty mask, returning zero curve")
        return np.zeros(tr.steps + 1)
    warped = warp_mask(mask0, tr.deformations)
    curve = np.empty(tr.steps + 1)
    curve[0] = mask0.sum() * area_scale
    curve[1:] = warped.sum(axis=(1, 2)) * area_scale
    return curve


def interp_velocities(observed_times: np.ndarray, observed_vels: np.ndarray,
                      t_total: int, method: str = "linear") -> np.ndarray:
    """Interpolate velocity fields to every step 1..T, per pixel/component.

    ``observed_times`` are frame indices (include 0 with a zero field to
    anchor the identity), strictly increasing. Evaluation clamps to the
    knot range, so nothing is extrapolated. Cubic interpolation needs at
    least four knots and falls back to linear (with a warning) otherwise.
    """
    times = np.asarray(observed_times, dtype=np.float64)
    vals = np.asarray(observed_vels)
    if times.ndim != 1 or np.any(np.diff(times) <= 0):
        raise ValueError("interp_velocities: observed times must be strictly increasing")
    if len(times) != vals.shape[0]:
        raise ValueError(f"interp_velocities: {len(times)} times vs {vals.shape[0]} fields")
    if len(times) < 2:
        raise ValueError("interp_velocities: need at least two knots")
    if method == "cubic" and len(times) < 4:
        log.warning("interp_velocities: cubic needs >= 4 knots, got %d; using linear",
                    len(times))
        method = "linear"
    query = np.clip(np.arange(1, t_total + 1, dtype=np.float64), times[0], times[-1])
    flat = vals.reshape(len(times), -1)
    if method == "linear":
        idx = np.clip(np.searchsorted(times, query, side="right") - 1, 0, len(times) - 2)
        t0, t1 = times[idx], times[idx + 1]
        w = ((query - t0) / (t1 - t0))[:, None]
        out = flat[idx] * (1.0 - w) + flat[idx + 1] * w
    elif method == "cubic":
        from scipy.interpolate import CubicSpline
        out = CubicSpline(times, flat, axis=0, bc_type="not-a-knot")(query)
    else:
        raise ValueError(f"interp_velocities: unknown method {method!r}")
    return out.reshape((t_total,) + vals.shape[1:]).astype(vals.dtype)


def baseline_from_tracking(tr: TrackingResult, observed, t_total: int,
                           method: str, exp_steps: int = 6) -> TrackingResult:
    """Interpolation baseline: velocities from tracking at observed times,
    interpolated in between, then exponentiated."""
    obs = sorted(set(int(i) for i in observed))
    if not obs or obs[0] != 0:
        raise ValueError("baseline_from_tracking: observed set must contain 0")
    zero = np.zeros_like(tr.velocities[:1])
    knots = np.concatenate([zero, tr.velocities[[i - 1 for i in obs if i >= 1]]])
    vels = interp_velocities(np.asarray(obs), knots, t_total, method)
    phi = exponentiate(Tensor(vels), exp_steps).data
    return TrackingResult(deformations=phi, velocities=vels, z=tr.z.copy(),
                          spacing_mm=tr.spacing_mm, observed=tuple(obs))


# -- metrics ----------------------------------------------------------------


@dataclass
class MetricsReport:
    rmse: np.ndarray                     # [T] intensity RMSE of warped moving vs fixed
    spatial_grad: np.ndarray             # [T] mean Frobenius norm of grad(u)
    temporal_grad: np.ndarray            # [T] mean |u_t - u_{t-1}| (u_0 = 0)
    min_det_j: np.ndarray                # [T] min interior Jacobian determinant
    folded_frames: list                  # frames with min interior det <= 0
    dice: np.ndarray | None = None       # [T] warped ED mask vs frame mask
    hd95_mm: np.ndarray | None = None    # [T]
    warnings: list = field(default_factory=list)


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / denom


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask with an 8-neighbourhood touching the outside."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, mode="constant")
    core = np.ones_like(m)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                core &= padded[1 + di:1 + di + m.shape[0], 1 + dj:1 + dj + m.shape[1]]
    return np.argwhere(m & ~core)


def hd95_mm(a: np.ndarray, b: np.ndarray, spacing_mm: float) -> float:
    """95th percentile of the pooled symmetric boundary distances, in mm."""
    pa, pb = boundary_points(a), boundary_points(b)
    if len(pa) == 0 or len(pb) == 0:
        return float("nan")
    d = cdist(pa.astype(np.float64), pb.astype(np.float64))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95) * spacing_mm)


def evaluate(tr: TrackingResult, seq: ImageSequence,
             masks: np.ndarray | None = None) -> MetricsReport:
    """Per-frame registration metrics; Dice/HD95 only when masks are given."""
    t = tr.steps
    phi = tr.deformations
    warped = kernels.gather_bilinear(
        np.broadcast_to(seq.moving.astype(phi.dtype), (t, 1) + seq.moving.shape).copy(),
        phi[:, 0], phi[:, 1])[:, 0]
    rmse = np.sqrt(np.mean((warped - seq.fixed.astype(phi.dtype)) ** 2, axis=(1, 2)))

    u = displacement(phi.astype(np.float64))
    grads = np.stack([np.gradient(u[:, c], axis=ax)
                      for c in (0, 1) for ax in (1, 2)], axis=1)
    spatial = np.sqrt((grads ** 2).sum(axis=1)).mean(axis=(1, 2))
    u_prev = np.concatenate([np.zeros_like(u[:1]), u[:-1]])
    temporal = np.linalg.norm(u - u_prev, axis=1).mean(axis=(1, 2))

    det = jacobian_determinant(phi.astype(np.float64))
    min_det = det[:, 1:-1, 1:-1].min(axis=(1, 2))
    folded = [int(i) for i in np.nonzero(min_det <= 0)[0]]
    warns = [f"frame {i + 1}: non-positive interior Jacobian determinant "
             f"(min {min_det[i]:.4f})" for i in folded]
    for w in warns:
        log.warning("evaluate: %s", w)

    dice = hd = None
    if masks is not None:
        masks = np.asarray(masks).astype(bool)
        if masks.shape[0] != t + 1:
            raise ValueError(f"evaluate: mask stack has {masks.shape[0]} frames, "
                             f"expected {t + 1}")
        warped_masks = warp_mask(masks[0], phi)
        dice = np.array([dice_score(warped_masks[i], masks[i + 1]) for i in range(t)])
        hd = np.array([hd95_mm(warped_masks[i], masks[i + 1], tr.spacing_mm)
                       for i in range(t)])
    return MetricsReport(rmse=rmse, spatial_grad=spatial, temporal_grad=temporal,
                         min_det_j=min_det, folded_frames=folded, dice=dice,
                         hd95_mm=hd, warnings=warns)
