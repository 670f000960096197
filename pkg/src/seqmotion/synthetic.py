"""Deterministic cardiac-like sequence generator with analytic ground truth.

Each sequence shows a textured annulus (ring = myocardium analogue, inner
disk = blood pool) contracting radially and recovering with a diastasis
plateau. The per-frame deformation is the flow of an analytic radial
velocity field, so every frame comes with an exact velocity field, an
analytic per-frame pool mask, and an exact area curve. Frames are
rendered with a high-resolution Runge-Kutta integration of that field --
a path independent of the model's scaling-and-squaring exponential, which
lets the generator double as an oracle for it.

Within the fully-moving region (radius <= outer radius) the flow is a
pure radial scaling, so the pool mask at contraction factor c is exactly
the ED disk scaled by c and its area is c^2 times the ED area.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .sequence import ImageSequence

CYCLE_FRACTION = 0.93  # sequences omit the final 7% of the cycle


@dataclass
class AnnulusSpec:
    """Geometry, contraction profile and texture of one synthetic subject."""

    center: tuple = (32.4, 31.6)   # off-lattice center keeps mask rasterization fair
    r_inner: float = 11.0
    r_outer: float = 19.0
    contraction: float = 0.25          # peak fractional radius reduction at ES
    tau_es: float = 0.35               # cycle phase of end-systole
    plateau: tuple = (0.70, 0.85)      # diastasis span in cycle phase
    fade_px: float = 6.0               # ramp from full motion to static background
    texture_seed: int = 0
    noise_level: float = 0.005

    def validate(self, h: int, w: int) -> None:
        if not 0.0 < self.contraction < 1.0:
            raise ValueError(f"AnnulusSpec: contraction must be in (0,1), got {self.contraction}")
        if not 0.0 < self.r_inner < self.r_outer:
            raise ValueError(f"AnnulusSpec: need 0 < r_inner < r_outer, got "
                             f"{self.r_inner}, {self.r_outer}")
        if self.r_outer + self.fade_px > min(h, w) / 2.0:
            raise ValueError(f"AnnulusSpec: outer radius {self.r_outer} plus fade "
                             f"{self.fade_px} exceeds the {h}x{w} frame")

    def es_frame(self, t: int) -> int:
        """Frame index closest to end-systole."""
        phases = CYCLE_FRACTION * np.arange(t + 1) / t
        return int(np.argmin(np.abs(phases - self.tau_es)))


def contraction_curve(spec: AnnulusSpec, phase: np.ndarray) -> np.ndarray:
    """Radius factor c(phase): 1 at ED, 1-a at ES, plateau in diastasis.

    Piecewise-cosine, continuously differentiable, monotone on [0, tau_es].
    """
    a = spec.contraction
    tau = spec.tau_es
    p0, p1 = spec.plateau
    c_es = 1.0 - a
    c_plateau = 1.0 - 0.25 * a
    phase = np.asarray(phase, dtype=np.float64)
    out = np.empty_like(phase)

    sys = phase <= tau
    out[sys] = 1.0 - a * 0.5 * (1.0 - np.cos(np.pi * phase[sys] / tau))
    fill = (phase > tau) & (phase < p0)
    frac = (phase[fill] - tau) / (p0 - tau)
    out[fill] = c_plateau + (c_es - c_plateau) * 0.5 * (1.0 + np.cos(np.pi * frac))
    plat = (phase >= p0) & (phase <= p1)
    out[plat] = c_plateau
    kick = phase > p1
    frac = (phase[kick] - p1) / (1.0 - p1)
    out[kick] = 1.0 + (c_plateau - 1.0) * 0.5 * (1.0 + np.cos(np.pi * frac))
    return out


def _radius_grid(spec: AnnulusSpec, h: int, w: int):
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    dy = rows - spec.center[0]
    dx = cols - spec.center[1]
    return dy, dx, np.hypot(dy, dx)


def _motion_weight(rho: np.ndarray, spec: AnnulusSpec) -> np.ndarray:
    """1 inside the outer radius, cosine ramp to 0 over the fade band."""
    w = np.ones_like(rho)
    band = (rho > spec.r_outer) & (rho < spec.r_outer + spec.fade_px)
    w[band] = 0.5 * (1.0 + np.cos(np.pi * (rho[band] - spec.r_outer) / spec.fade_px))
    w[rho >= spec.r_outer + spec.fade_px] = 0.0
    return w


def velocity_field(spec: AnnulusSpec, c: float, h: int, w: int) -> np.ndarray:
    """Analytic stationary velocity whose flow samples frame t from the ED frame.

    v(x) = -log(c) * weight(rho) * (x - center); its exponential is exactly
    x/c wherever the whole trajectory stays inside the outer radius.
    """
    dy, dx, rho = _radius_grid(spec, h, w)
    k = -np.log(c) * _motion_weight(rho, spec)
    return np.stack([k * dy, k * dx])


def ground_truth_velocities(spec: AnnulusSpec, h: int, w: int, t: int) -> np.ndarray:
    """Velocity fields [T, 2, H, W] (float64) for frames 1..T."""
    phases = CYCLE_FRACTION * np.arange(1, t + 1) / t
    cs = contraction_curve(spec, phases)
    return np.stack([velocity_field(spec, c, h, w) for c in cs])


def _velocity_at(points: np.ndarray, spec: AnnulusSpec, c: float) -> np.ndarray:
    """Evaluate the analytic velocity at continuous points [2, n]."""
    dy = points[0] - spec.center[0]
    dx = points[1] - spec.center[1]
    rho = np.hypot(dy, dx)
    wgt = np.ones_like(rho)
    band = (rho > spec.r_outer) & (rho < spec.r_outer + spec.fade_px)
    wgt[band] = 0.5 * (1.0 + np.cos(np.pi * (rho[band] - spec.r_outer) / spec.fade_px))
    wgt[rho >= spec.r_outer + spec.fade_px] = 0.0
    k = -np.log(c) * wgt
    return np.stack([k * dy, k * dx])


def flow_map(spec: AnnulusSpec, c: float, h: int, w: int, substeps: int = 32) -> np.ndarray:
    """Unit-time RK4 flow of the analytic velocity from every pixel, [2, H, W].

    Integrates the closed-form field (no grid interpolation), so it is an
    implementation-independent reference for the exponential.
    """
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
    x = np.stack([rows.ravel(), cols.ravel()])
    dt = 1.0 / substeps
    for _ in range(substeps):
        k1 = _velocity_at(x, spec, c)
        k2 = _velocity_at(x + 0.5 * dt * k1, spec, c)
        k3 = _velocity_at(x + 0.5 * dt * k2, spec, c)
        k4 = _velocity_at(x + dt * k3, spec, c)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x.reshape(2, h, w)


def _smooth_noise(rng, h: int, w: int, sigma: float, amplitude: float) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((h, w)), sigma)
    tex /= max(np.abs(tex).max(), 1e-12)
    return amplitude * tex


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def ed_template(spec: AnnulusSpec, h: int, w: int) -> np.ndarray:
    """The ED frame as a float64 image in roughly [0.05, 0.95].

    Three textured zones (pool, ring, background) with distinct means and
    soft, rasterization-friendly edges; texture everywhere so local
    correlation carries signal.
    """
    rng = np.random.default_rng([spec.texture_seed, 0xA11])
    _, _, rho = _radius_grid(spec, h, w)
    background = 0.30 + _smooth_noise(rng, h, w, 3.0, 0.16)
    ring = 0.55 + _smooth_noise(rng, h, w, 2.5, 0.14)
    pool = 0.85 + _smooth_noise(rng, h, w, 3.5, 0.10)
    edge = 1.0
    in_outer = _sigmoid((spec.r_outer - rho) / edge)
    in_inner = _sigmoid((spec.r_inner - rho) / edge)
    return background + (ring - background) * in_outer + (pool - ring) * in_inner


def _bilinear_at(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    h, w = img.shape
    r = np.clip(coords[0], 0.0, h - 1.0)
    c = np.clip(coords[1], 0.0, w - 1.0)
    r0 = np.minimum(r.astype(np.int64), h - 2)
    c0 = np.minimum(c.astype(np.int64), w - 2)
    fr, fc = r - r0, c - c0
    return ((1 - fr) * (1 - fc) * img[r0, c0] + (1 - fr) * fc * img[r0, c0 + 1]
            + fr * (1 - fc) * img[r0 + 1, c0] + fr * fc * img[r0 + 1, c0 + 1])


def pool_masks(spec: AnnulusSpec, h: int, w: int, t: int) -> np.ndarray:
    """Analytic blood-pool mask per frame: the disk of radius c_t * r_inner."""
    phases = CYCLE_FRACTION * np.arange(t + 1) / t
    cs = contraction_curve(spec, phases)
    _, _, rho = _radius_grid(spec, h, w)
    return np.stack([rho <= c * spec.r_inner for c in cs])


def generate_sequence(spec: AnnulusSpec, h: int, w: int, t: int,
                      seed: int) -> tuple[ImageSequence, np.ndarray, np.ndarray]:
    """Render one sequence.

    Returns ``(sequence, masks, gt_velocities)`` where masks is the
    analytic pool mask stack [T+1, H, W] (also attached to the sequence)
    and gt_velocities holds the exact fields [T, 2, H, W] for frames 1..T.
    Identical (spec, seed) pairs render bit-identical sequences.
    """
    if t < 4:
        raise ValueError(f"generate_sequence: need T >= 4, got {t}")
    spec.validate(h, w)
    template = ed_template(spec, h, w)
    phases = CYCLE_FRACTION * np.arange(t + 1) / t
    cs = contraction_curve(spec, phases)
    noise_rng = np.random.default_rng([seed, 0xF00D])
    frames = np.empty((t + 1, h, w), np.float64)
    frames[0] = template
    for i in range(1, t + 1):
        phi = flow_map(spec, cs[i], h, w)
        frames[i] = _bilinear_at(template, phi.reshape(2, -1)).reshape(h, w)
    frames += noise_rng.normal(0.0, spec.noise_level, frames.shape)
    masks = pool_masks(spec, h, w, t)
    seq = ImageSequence(frames.astype(np.float32), spacing_mm=1.5, masks=masks)
    return seq, masks, ground_truth_velocities(spec, h, w, t)


def analytic_area_curve(spec: AnnulusSpec, t: int, spacing_mm: float = 1.5) -> np.ndarray:
    """Exact pool area per frame in mm^2: pi * (c_t * r_inner * spacing)^2."""
    phases = CYCLE_FRACTION * np.arange(t + 1) / t
    cs = contraction_curve(spec, phases)
    return np.pi * (cs * spec.r_inner * spacing_mm) ** 2


def draw_spec(rng, h: int, w: int) -> AnnulusSpec:
    """Randomized subject geometry for dataset generation."""
    r_inner = float(rng.uniform(9.0, 13.0))
    r_outer = r_inner + float(rng.uniform(5.5, 8.5))
    center = (h / 2.0 + float(rng.uniform(-3.0, 3.0)),
              w / 2.0 + float(rng.uniform(-3.0, 3.0)))
    return AnnulusSpec(center=center, r_inner=r_inner, r_outer=r_outer,
                       contraction=float(rng.uniform(0.15, 0.35)),
                       texture_seed=int(rng.integers(0, 2 ** 31)))


def generate_dataset(out_dir: str, n_train: int, n_test: int, h: int, w: int,
                     t_range: tuple, master_seed: int) -> dict:
    """Write train/test splits as MSEQ files plus a JSON manifest.

    Train and test subjects come from disjoint seed streams. The manifest
    records every spec so ground-truth velocities and masks can be
    re-derived analytically.
    """
    from .seqio import write_mseq

    manifest = {"height": h, "width": w, "t_range": list(t_range),
                "master_seed": master_seed, "train": [], "test": []}
    for split, count, salt in (("train", n_train, 0x7EA1), ("test", n_test, 0x7E57)):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for i in range(count):
            rng = np.random.default_rng([master_seed, salt, i])
            spec = draw_spec(rng, h, w)
            t = int(rng.integers(t_range[0], t_range[1] + 1))
            seed = int(rng.integers(0, 2 ** 31))
            seq, _, _ = generate_sequence(spec, h, w, t, seed)
            rel = os.path.join(split, f"seq_{i:04d}.mseq")
            write_mseq(seq, os.path.join(out_dir, rel))
            entry = {"path": rel, "T": t, "seed": seed, "es_frame": spec.es_frame(t),
                     "spec": asdict(spec)}
            manifest[split].append(entry)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def spec_from_manifest(entry: dict) -> AnnulusSpec:
    kwargs = dict(entry["spec"])
    kwargs["center"] = tuple(kwargs["center"])
    kwargs["plateau"] = tuple(kwargs["plateau"])
    return AnnulusSpec(**kwargs)
