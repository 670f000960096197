"""The three model networks and their combined forward pass.

* encoder: maps each image pair (moving, fixed_t) independently to the
  mean/log-variance of a d-dimensional latent; weights shared over t.
* temporal net: non-causal dilated 1-d convolutions over the latent
  sequence concatenated with normalized time, with per-layer 1x1 skip
  projections summed into the motion matrix.
* decoder: maps one motion-matrix column to a velocity field, conditioned
  on the moving image by concatenating its average-pooled copies at every
  scale; the output is spatially smoothed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .deformation import exponentiate, smooth_spatial, smooth_temporal
from .engine import (ParamStore, Tensor, as_tensor, avg_pool2d, concat,
                     conv1d_dilated, conv2d, conv2d_transpose, dense, exp,
                     leaky_relu, matmul, mul, reshape, transpose)
from .losses import LatentGaussian
from .sequence import ImageSequence


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and regularization constants."""

    height: int = 64
    width: int = 64
    latent_dim: int = 32
    enc_channels: tuple = (16, 32, 32, 4)
    enc_strides: tuple = (2, 2, 2, 1)
    dec_channels: tuple = (32, 32, 16)
    tcn_dilations: tuple = (1, 2, 4, 8)
    kernel_size: int = 3
    sigma_g_mm: float = 3.0
    sigma_t_frames: float = 1.5
    spacing_mm: float = 1.5
    lcc_window: int = 9
    lam: float = 6.0e4
    exp_steps: int = 6
    velocity_gain: float = 1.0
    leaky_slope: float = 0.2
    dtype: str = "float32"

    def __post_init__(self):
        down = 1
        for s in self.enc_strides:
            down *= s
        if self.height % down or self.width % down:
            raise ValueError(f"ModelConfig: extent {self.height}x{self.width} must be "
                             f"divisible by {down} (stride product)")
        if any(b <= a for a, b in zip(self.tcn_dilations, self.tcn_dilations[1:])):
            raise ValueError(f"ModelConfig: dilations must be strictly increasing, "
                             f"got {self.tcn_dilations}")
        if self.lcc_window % 2 == 0:
            raise ValueError(f"ModelConfig: LCC window must be odd, got {self.lcc_window}")

    @property
    def seed_shape(self) -> tuple:
        down = 1
        for s in self.enc_strides:
            down *= s
        return (self.enc_channels[-1], self.height // down, self.width // down)

    @property
    def flat_features(self) -> int:
        c, h, w = self.seed_shape
        return c * h * w

    @property
    def receptive_radius(self) -> int:
        """Influence radius of the temporal net in frames."""
        return (self.kernel_size - 1) // 2 * sum(self.tcn_dilations)

    def with_dtype(self, dtype: str) -> "ModelConfig":
        return replace(self, dtype=dtype)


@dataclass
class ModelOutput:
    """Forward-pass products; deformations are None when not requested."""

    z: Tensor                 # motion matrix [d, T]
    velocities: Tensor        # [T, 2, H, W]
    deformations: Tensor | None
    q: LatentGaussian
    latents: Tensor           # sampled encodings fed to the temporal net [T, d]


def _he_uniform(rng, shape, fan_in, dtype, gain=1.0):
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Seeded He-uniform initialization.

    The log-variance head starts at zero (posterior = prior) and the final
    velocity head is scaled down 100x so training starts near the identity
    deformation.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    dt = np.dtype(cfg.dtype).str
    store = ParamStore()
    d = cfg.latent_dim
    k = cfg.kernel_size

    cin = 2
    for i, (cout, _) in enumerate(zip(cfg.enc_channels, cfg.enc_strides)):
        store.add(f"enc.conv{i}.w", _he_uniform(rng, (cout, cin, k, k), cin * k * k, dt))
        store.add(f"enc.conv{i}.b", np.zeros(cout, dt))
        cin = cout
    nflat = cfg.flat_features
    store.add("enc.mu.w", _he_uniform(rng, (d, nflat), nflat, dt))
    store.add("enc.mu.b", np.zeros(d, dt))
    store.add("enc.logvar.w", np.zeros((d, nflat), dt))
    store.add("enc.logvar.b", np.zeros(d, dt))

    cin = d + 1
    for i, _ in enumerate(cfg.tcn_dilations):
        store.add(f"tcn.conv{i}.w", _he_uniform(rng, (d, cin, 3), cin * 3, dt))
        store.add(f"tcn.conv{i}.b", np.zeros(d, dt))
        store.add(f"tcn.skip{i}.w", _he_uniform(rng, (d, d), d, dt))
        cin = d

    seed_c, seed_h, seed_w = cfg.seed_shape
    store.add("dec.fc.w", _he_uniform(rng, (seed_c * seed_h * seed_w, d), d, dt))
    store.add("dec.fc.b", np.zeros(seed_c * seed_h * seed_w, dt))
    cin = seed_c
    for i, cout in enumerate(cfg.dec_channels):
        store.add(f"dec.deconv{i}.w",
                  _he_uniform(rng, (cin + 1, cout, k, k), (cin + 1) * k * k, dt))
        store.add(f"dec.deconv{i}.b", np.zeros(cout, dt))
        cin = cout
    store.add("dec.out.w",
              _he_uniform(rng, (2, cin + 1, k, k), (cin + 1) * k * k, dt, gain=0.01))
    store.add("dec.out.b", np.zeros(2, dt))
    return store


def encode_pairs(moving: np.ndarray, fixed: np.ndarray, params: ParamStore,
                 cfg: ModelConfig) -> LatentGaussian:
    """Encode every (moving, fixed_t) pair; returns [T, d] statistics."""
    t = fixed.shape[0]
    if fixed.shape[1:] != (cfg.height, cfg.width) or moving.shape != (cfg.height, cfg.width):
        raise ValueError(f"encode: frames {moving.shape}/{fixed.shape} do not match "
                         f"configured extent {cfg.height}x{cfg.width}")
    dt = np.dtype(cfg.dtype)
    x = np.empty((t, 2, cfg.height, cfg.width), dt)
    x[:, 0] = moving.astype(dt)
    x[:, 1] = fixed.astype(dt)
    h = Tensor(x)
    for i, stride in enumerate(cfg.enc_strides):
        h = conv2d(h, params[f"enc.conv{i}.w"], params[f"enc.conv{i}.b"],
                   stride=stride, padding="same")
        h = leaky_relu(h, cfg.leaky_slope)
    h = reshape(h, (t, cfg.flat_features))
    mu = dense(h, params["enc.mu.w"], params["enc.mu.b"])
    logvar = dense(h, params["enc.logvar.w"], params["enc.logvar.b"])
    return LatentGaussian(mu, logvar)


def encode(moving: np.ndarray, fixed: np.ndarray, params: ParamStore,
           cfg: ModelConfig) -> LatentGaussian:
    """Single-pair encoding; time never enters, only the pair does."""
    return encode_pairs(np.asarray(moving), np.asarray(fixed)[None], params, cfg)


def normalized_times(t: int, dtype="float32") -> np.ndarray:
    """t/T for t = 1..T."""
    return (np.arange(1, t + 1) / float(t)).astype(dtype)


def temporal_regularize(latents: Tensor, t_bar: np.ndarray, params: ParamStore,
                        cfg: ModelConfig) -> Tensor:
    """Map sampled encodings [T, d] to the motion matrix [d, T].

    Input channels are the d latent rows plus the normalized-time row;
    each dilated layer's activations are projected by a 1x1 matrix and
    summed into the output.
    """
    latents = as_tensor(latents)
    t = latents.data.shape[0]
    if t_bar.shape != (t,):
        raise ValueError(f"temporal_regularize: time row {t_bar.shape} does not match T={t}")
    h = concat([transpose(latents), Tensor(t_bar[None].astype(latents.data.dtype))], axis=0)
    z = None
    for i, dil in enumerate(cfg.tcn_dilations):
        h = leaky_relu(conv1d_dilated(h, params[f"tcn.conv{i}.w"], params[f"tcn.conv{i}.b"],
                                      dilation=dil), cfg.leaky_slope)
        proj = matmul(params[f"tcn.skip{i}.w"], h)
        z = proj if z is None else z + proj
    return z


def _pooled_moving(moving: np.ndarray, cfg: ModelConfig, t: int) -> list[Tensor]:
    dt = np.dtype(cfg.dtype)
    img = Tensor(np.broadcast_to(moving.astype(dt), (t, 1, cfg.height, cfg.width)).copy())
    pools = []
    factor = 2 ** len(cfg.dec_channels)
    for _ in range(len(cfg.dec_channels)):
        pools.append(avg_pool2d(img, factor))
        factor //= 2
    pools.append(img)
    return pools


def decode_columns(z: Tensor, moving: np.ndarray, params: ParamStore,
                   cfg: ModelConfig) -> Tensor:
    """Decode motion-matrix columns [d, T] into velocity fields [T, 2, H, W]."""
    z = as_tensor(z)
    if z.data.shape[0] != cfg.latent_dim:
        raise ValueError(f"decode: motion matrix has {z.data.shape[0]} rows, "
                         f"model expects {cfg.latent_dim}")
    t = z.data.shape[1]
    pools = _pooled_moving(np.asarray(moving), cfg, t)
    h = leaky_relu(dense(transpose(z), params["dec.fc.w"], params["dec.fc.b"]),
                   cfg.leaky_slope)
    h = reshape(h, (t,) + cfg.seed_shape)
    for i in range(len(cfg.dec_channels)):
        h = concat([h, pools[i]], axis=1)
        h = leaky_relu(conv2d_transpose(h, params[f"dec.deconv{i}.w"],
                                        params[f"dec.deconv{i}.b"], stride=2),
                       cfg.leaky_slope)
    h = concat([h, pools[-1]], axis=1)
    v = conv2d(h, params["dec.out.w"], params["dec.out.b"], stride=1, padding="same")
    if cfg.velocity_gain != 1.0:
        v = mul(v, cfg.velocity_gain)
    return smooth_spatial(v, cfg.sigma_g_mm, cfg.spacing_mm)


def decode(z_t: Tensor, moving: np.ndarray, params: ParamStore,
           cfg: ModelConfig) -> Tensor:
    """Decode a single column [d] into one velocity field [2, H, W]."""
    z_t = as_tensor(z_t)
    v = decode_columns(reshape(z_t, (cfg.latent_dim, 1)), moving, params, cfg)
    return reshape(v, v.data.shape[1:])


# -- latent sampling policies ---------------------------------------------


def sample_latents(q: LatentGaussian, mode: str = "mean", rng=None,
                   mask: np.ndarray | None = None) -> Tensor:
    """Draw the encodings fed to the temporal net, [T, d].

    Modes: ``mean`` (posterior mean), ``posterior`` (reparameterized),
    ``prior`` (unit Gaussian, independent of the encoder), ``tds``
    (per-step Bernoulli mix of prior and posterior given ``mask``).
    Stochastic modes always draw the prior noise first, then the posterior
    noise, so a seeded generator reproduces the exact samples.
    """
    t, d = q.mu.data.shape
    dt = q.mu.data.dtype
    if mode == "mean":
        return q.mu
    if rng is None:
        raise ValueError(f"sample_latents: mode {mode!r} needs an rng")
    eps_prior = rng.standard_normal((t, d)).astype(dt)
    eps_post = rng.standard_normal((t, d)).astype(dt)
    if mode == "prior":
        return Tensor(eps_prior)
    posterior = q.mu + mul(exp(mul(q.logvar, 0.5)), Tensor(eps_post))
    if mode == "posterior":
        return posterior
    if mode == "tds":
        if mask is None or mask.shape != (t,):
            raise ValueError("sample_latents: tds mode needs a [T] mask")
        keep = mask.astype(dt)[:, None]
        return mul(posterior, Tensor(1.0 - keep)) + Tensor(eps_prior * keep)
    raise ValueError(f"sample_latents: unknown mode {mode!r}")


def model_forward(seq: ImageSequence, params: ParamStore, cfg: ModelConfig,
                  mode: str = "mean", rng=None, mask: np.ndarray | None = None,
                  latents: Tensor | None = None,
                  want_deformations: bool = True) -> ModelOutput:
    """Full pass: encode pairs, sample, regularize in time, decode, exponentiate.

    ``latents`` overrides the sampling policy with precomputed encodings
    (used by reconstruction from observed subsets).
    """
    if seq.steps < 1:
        raise ValueError("model_forward: sequence needs at least one fixed frame")
    q = encode_pairs(seq.moving, seq.fixed, params, cfg)
    zt = latents if latents is not None else sample_latents(q, mode, rng, mask)
    z = temporal_regularize(zt, normalized_times(seq.steps, cfg.dtype), params, cfg)
    v = decode_columns(z, seq.moving, params, cfg)
    v = smooth_temporal(v, cfg.sigma_t_frames)
    phi = exponentiate(v, cfg.exp_steps) if want_deformations else None
    return ModelOutput(z=z, velocities=v, deformations=phi, q=q, latents=zt)
