"""Training loop: temporal dropout sampling, augmentation, checkpointing.

Each step draws one sequence (batch size is fixed at one), applies a
shared random rigid+scale transform to every frame, runs the model with
temporal dropout sampling and takes one Adam step on the combined
reconstruction/KL objective. All randomness for step ``k`` comes from
``default_rng([seed, STEP_KEY, k])``, which makes checkpoint resumption
bit-exact without serializing generator state.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .engine import ParamStore, adam_step, load_arrays, save_arrays
from .losses import LatentGaussian, elbo_objective, kl_to_unit_gaussian, symmetric_lcc_sequence
from .networks import ModelConfig, Tensor, init_params, model_forward, sample_latents
from .sequence import ImageSequence

log = logging.getLogger(__name__)

STEP_KEY = 104729
MAX_CONSECUTIVE_BAD = 3

LOG_FIELDS = ("step", "epoch", "loss", "lcc_mean", "kl_mean", "wall_ms")


class NumericalError(RuntimeError):
    """Training diverged: repeated non-finite losses."""


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 1.5e-4
    delta: float = 0.5
    batch_size: int = 1
    seed: int = 0
    augment: bool = True
    shift_px: float = 8.0
    rot_deg: float = 15.0
    scale_low: float = 0.9
    scale_high: float = 1.1
    mirror: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"TrainConfig: delta must be in [0,1], got {self.delta}")
        if self.lr <= 0:
            raise ValueError(f"TrainConfig: lr must be positive, got {self.lr}")
        if self.batch_size != 1:
            raise ValueError("TrainConfig: batch size is fixed at one")


@dataclass
class AugmentParams:
    """One rigid+scale transform, applied identically to every frame."""

    shift: tuple = (0.0, 0.0)
    angle_deg: float = 0.0
    scale: float = 1.0
    mirror: bool = False

    @property
    def is_identity(self) -> bool:
        return (self.shift == (0.0, 0.0) and self.angle_deg == 0.0
                and self.scale == 1.0 and not self.mirror)


def draw_augment_params(cfg: TrainConfig, rng) -> AugmentParams:
    shift = tuple(rng.uniform(-cfg.shift_px, cfg.shift_px, 2))
    angle = float(rng.uniform(-cfg.rot_deg, cfg.rot_deg))
    scale = float(rng.uniform(cfg.scale_low, cfg.scale_high))
    mirror = bool(rng.random() < 0.5) if cfg.mirror else False
    return AugmentParams(shift=shift, angle_deg=angle, scale=scale, mirror=mirror)


def apply_augment(seq: ImageSequence, p: AugmentParams) -> ImageSequence:
    """Resample every frame with the same transform (bilinear, border clamp).

    Sharing the transform across frames preserves the sequence's motion;
    an identity draw returns the input frames untouched.
    """
    if p.is_identity:
        return ImageSequence(seq.frames, seq.spacing_mm, seq.masks)
    h, w = seq.height, seq.width
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float32),
                             np.arange(w, dtype=np.float32), indexing="ij")
    ry = rows - cy - p.shift[0]
    rx = cols - cx - p.shift[1]
    th = np.deg2rad(p.angle_deg)
    cos_t, sin_t = np.cos(th), np.sin(th)
    src_r = (cos_t * ry - sin_t * rx) / p.scale + cy
    src_c = (sin_t * ry + cos_t * rx) / p.scale + cx
    if p.mirror:
        src_c = (w - 1.0) - src_c
    n = seq.frames.shape[0]
    src_rb = np.broadcast_to(src_r.astype(np.float32), (n, h, w))
    src_cb = np.broadcast_to(src_c.astype(np.float32), (n, h, w))
    frames = kernels.gather_bilinear(seq.frames[:, None], src_rb, src_cb)[:, 0]
    return ImageSequence(frames, seq.spacing_mm)


def augment(seq: ImageSequence, cfg: TrainConfig, rng) -> ImageSequence:
    return apply_augment(seq, draw_augment_params(cfg, rng))


def draw_dropout_mask(t: int, delta: float, rng) -> np.ndarray:
    """Independent Bernoulli(delta) per time step; 1 selects the prior."""
    return rng.random(t) < delta


def temporal_dropout_sample(q: LatentGaussian, mask: np.ndarray, rng) -> Tensor:
    """Mix prior and reparameterized posterior samples per the mask, [T, d].

    Where the mask is set the column is a unit-Gaussian draw carrying no
    encoder gradient; elsewhere it is mean + sigma * noise.
    """
    if mask.shape != (q.steps,):
        raise ValueError(f"temporal_dropout_sample: mask shape {mask.shape} "
                         f"does not match T={q.steps}")
    return sample_latents(q, mode="tds", rng=rng, mask=np.asarray(mask))


# -- checkpoints -----------------------------------------------------------

_CFG_SCALARS = ("height", "width", "latent_dim", "kernel_size", "sigma_g_mm",
                "sigma_t_frames", "spacing_mm", "lcc_window", "lam", "exp_steps",
                "velocity_gain", "leaky_slope")
_CFG_TUPLES = ("enc_channels", "enc_strides", "dec_channels", "tcn_dilations")


def save_model_checkpoint(path: str, params: ParamStore, cfg: ModelConfig,
                          train_step: int = 0) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, t in params.params.items():
        arrays[f"param.{name}"] = t.data
        arrays[f"adam.m.{name}"] = params.m[name]
        arrays[f"adam.v.{name}"] = params.v[name]
    arrays["meta.adam_step"] = np.array([params.step], np.float32)
    arrays["meta.train_step"] = np.array([train_step], np.float32)
    for key in _CFG_SCALARS:
        arrays[f"cfg.{key}"] = np.array([getattr(cfg, key)], np.float32)
    for key in _CFG_TUPLES:
        arrays[f"cfg.{key}"] = np.array(getattr(cfg, key), np.float32)
    save_arrays(path, arrays)


def load_model_checkpoint(path: str, dtype: str = "float32"):
    """Returns (params, cfg, train_step). Arrays are cast to ``dtype``."""
    arrays = load_arrays(path)
    kwargs = {}
    for key in _CFG_SCALARS:
        val = float(arrays[f"cfg.{key}"][0])
        kwargs[key] = int(val) if key in ("height", "width", "latent_dim",
                                          "kernel_size", "lcc_window", "exp_steps") else val
    for key in _CFG_TUPLES:
        kwargs[key] = tuple(int(x) for x in arrays[f"cfg.{key}"])
    cfg = ModelConfig(dtype=dtype, **kwargs)
    store = ParamStore()
    for name in sorted(arrays):
        if name.startswith("param."):
            pname = name[len("param."):]
            store.add(pname, arrays[name].astype(dtype))
            store.m[pname] = arrays[f"adam.m.{pname}"].astype(dtype)
            store.v[pname] = arrays[f"adam.v.{pname}"].astype(dtype)
    store.step = int(arrays["meta.adam_step"][0])
    return store, cfg, int(arrays["meta.train_step"][0])


# -- the loop --------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    log_rows: list = field(default_factory=list)
    best_loss: float = np.inf
    last_path: str | None = None
    best_path: str | None = None


def train_step_loss(seq: ImageSequence, params: ParamStore, mcfg: ModelConfig,
                    tcfg: TrainConfig, rng):
    """One forward pass with TDS; returns (loss, lcc_t, kl_t) tensors."""
    mask = draw_dropout_mask(seq.steps, tcfg.delta, rng)
    out = model_forward(seq, params, mcfg, mode="tds", rng=rng, mask=mask,
                        want_deformations=False)
    lcc_t = symmetric_lcc_sequence(seq.moving, seq.fixed, out.velocities,
                                   window=mcfg.lcc_window, exp_steps=mcfg.exp_steps)
    loss = elbo_objective(lcc_t, out.q, mcfg.lam)
    kl_t = kl_to_unit_gaussian(out.q.mu, out.q.logvar)
    return loss, lcc_t, kl_t


def train(dataset: list[ImageSequence], mcfg: ModelConfig, tcfg: TrainConfig,
          out_dir: str | None = None, resume_from: str | None = None,
          params: ParamStore | None = None) -> TrainResult:
    """Train on a list of sequences (lengths may vary; extents must match).

    Writes ``train_log.csv`` plus ``last``/``best`` checkpoints into
    ``out_dir`` when given. ``resume_from`` restores parameters, Adam
    state and the global step, and continues with identical randomness
    (the provided configs must match the original run).
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    for s in dataset:
        if (s.height, s.width) != (mcfg.height, mcfg.width):
            raise ValueError(f"train: sequence extent {s.height}x{s.width} does not "
                             f"match model {mcfg.height}x{mcfg.width}")
    start_step = 0
    if resume_from is not None:
        params, _, start_step = load_model_checkpoint(resume_from, mcfg.dtype)
    elif params is None:
        params = init_params(mcfg, tcfg.seed)

    result = TrainResult(params=params)
    n = len(dataset)
    csv_fh = None
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.csv")
        fresh = not (resume_from and os.path.exists(log_path))
        csv_fh = open(log_path, "a", newline="")
        writer = csv.writer(csv_fh)
        if fresh and csv_fh.tell() == 0:
            writer.writerow(LOG_FIELDS)

    bad_streak = 0
    total_steps = tcfg.epochs * n
    perm = None
    epoch_losses: list[float] = []
    try:
        for step in range(start_step, total_steps):
            epoch = step // n
            pos = step % n
            if pos == 0 or perm is None:
                # a mid-epoch resume re-derives the same permutation; its
                # epoch mean then covers only the remaining steps
                perm = np.random.default_rng([tcfg.seed, 7919, epoch]).permutation(n)
                if pos == 0:
                    epoch_losses = []
            seq = dataset[int(perm[pos])]
            rng = np.random.default_rng([tcfg.seed, STEP_KEY, step])
            t0 = time.perf_counter()
            if tcfg.augment:
                seq = augment(seq, tcfg, rng)
            loss, lcc_t, kl_t = train_step_loss(seq, params, mcfg, tcfg, rng)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                bad_streak += 1
                log.warning("train: non-finite loss at step %d (streak %d); step skipped",
                            step, bad_streak)
                if bad_streak >= MAX_CONSECUTIVE_BAD:
                    raise NumericalError(
                        f"{bad_streak} consecutive non-finite losses at step {step}; "
                        "lower the learning rate or inspect the data")
                continue
            bad_streak = 0
            loss.backward()
            grads = params.grads()
            params.zero_grad()
            adam_step(params, grads, tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2,
                      tcfg.adam_eps)
            wall_ms = (time.perf_counter() - t0) * 1e3
            row = {"step": step, "epoch": epoch, "loss": loss_val,
                   "lcc_mean": float(lcc_t.data.mean()),
                   "kl_mean": float(kl_t.data.mean()), "wall_ms": wall_ms}
            result.log_rows.append(row)
            epoch_losses.append(loss_val)
            if writer is not None:
                writer.writerow([row[k] for k in LOG_FIELDS])
            if pos == n - 1 and epoch_losses:
                mean_loss = float(np.mean(epoch_losses))
                log.info("epoch %d: mean loss %.1f, lcc %.4f, kl %.2f",
                         epoch, mean_loss, row["lcc_mean"], row["kl_mean"])
                if out_dir is not None:
                    result.last_path = os.path.join(out_dir, "last")
                    save_model_checkpoint(result.last_path, params, mcfg, step + 1)
                    if mean_loss < result.best_loss:
                        result.best_loss = mean_loss
                        result.best_path = os.path.join(out_dir, "best")
                        save_model_checkpoint(result.best_path, params, mcfg, step + 1)
                if csv_fh is not None:
                    csv_fh.flush()
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return result
