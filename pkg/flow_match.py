"""Rectified-flow objective and sampler.

The path runs from clean data at t=0 to unit Gaussian noise at t=1:
x_t = (1 - t) x0 + t x1, with constant velocity v = x1 - x0. Timesteps are
per frame so conditioning frames can sit at t=0 while the rest are noised.

A velocity function is any callable ``fn(x_t, t) -> array`` where ``x_t`` is
[B, T, ...] and ``t`` is [B, T]; the pipeline wraps the STDiT (with its text and
fps conditioning bound) into one.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import expit, softmax
from scipy.stats import norm, wasserstein_distance
from tqdm import tqdm

from config import (
    LEARNING_RATE,
    LOGIT_NORMAL_LOC,
    LOGIT_NORMAL_SCALE,
    REFERENCE_TOKEN_COUNT,
    SAMPLING_STEPS,
    VALIDATION_TIMESTEPS,
)
from errors import ConfigError, DegenerateStatsError, DimensionError, DomainError, PreconditionError
from numerics import MLP, Adam, Tensor, make_rng, mse

logger = logging.getLogger(__name__)

VelocityFn = Callable[[np.ndarray, np.ndarray], object]

# Keeps drawn timesteps strictly inside (0, 1) even when the sigmoid saturates
_T_MARGIN = 1e-7


@dataclass
class FlowConfig:
    steps: int = SAMPLING_STEPS
    loc: float = LOGIT_NORMAL_LOC
    scale: float = LOGIT_NORMAL_SCALE
    reference_tokens: int = REFERENCE_TOKEN_COUNT
    resolution_shift: bool = True
    learning_rate: float = LEARNING_RATE
    validation_timesteps: int = VALIDATION_TIMESTEPS
    guidance_scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"sampling steps must be >= 1, got {self.steps}")
        if not self.scale > 0:
            raise ConfigError(f"logit-normal scale must be positive, got {self.scale}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.reference_tokens < 1 or self.validation_timesteps < 1:
            raise ConfigError("reference token count and validation timesteps must be >= 1")


@dataclass
class NoisedSample:
    x_t: np.ndarray
    t: np.ndarray
    velocity: np.ndarray


def _frame_times(t, x: np.ndarray) -> np.ndarray:
    """Broadcast per-frame timesteps over the trailing axes of ``x``."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim and x.shape[: t.ndim] != t.shape:
        raise DimensionError(f"timesteps {t.shape} do not index the leading axes of {x.shape}")
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def interpolate(x0, x1, t) -> np.ndarray:
    """Point on the straight path between ``x0`` (t=0) and ``x1`` (t=1), per frame."""
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise DomainError("timesteps must lie in [0, 1]")
    tf = _frame_times(t, x0)
    out = (1.0 - tf) * x0.astype(np.float64) + tf * x1.astype(np.float64)
    return out.astype(np.float32)


def velocity_target(x0, x1) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float32)
    x1 = np.asarray(x1, dtype=np.float32)
    if x0.shape != x1.shape:
        raise DimensionError(f"velocity_target: shapes {x0.shape} and {x1.shape} differ")
    return x1 - x0


def noise_sample(x0, x1, t) -> NoisedSample:
    return NoisedSample(interpolate(x0, x1, t), np.asarray(t, dtype=np.float64), velocity_target(x0, x1))


def resolution_shift(u, alpha: float) -> np.ndarray:
    """Monotone map of [0, 1] onto itself; alpha > 1 moves mass toward noise."""
    u = np.asarray(u, dtype=np.float64)
    return alpha * u / (1.0 + (alpha - 1.0) * u)


def shift_factor(token_count: int, reference_tokens: int = REFERENCE_TOKEN_COUNT) -> float:
    if token_count < 1:
        raise PreconditionError(f"token count must be >= 1, got {token_count}")
    return float(np.sqrt(token_count / reference_tokens))


def sample_timestep(rng: np.random.Generator, cfg: FlowConfig, token_count: int, size=None):
    """Logit-normal draw followed by the resolution-aware shift."""
    alpha = shift_factor(token_count, cfg.reference_tokens) if cfg.resolution_shift else 1.0
    u = expit(rng.normal(cfg.loc, cfg.scale, size=size))
    t = np.clip(resolution_shift(u, alpha), _T_MARGIN, 1.0 - _T_MARGIN)
    return float(t) if size is None else t


def logit_normal_cdf(t, loc: float = LOGIT_NORMAL_LOC, scale: float = LOGIT_NORMAL_SCALE):
    """CDF of sigmoid(N(loc, scale)); used as the reference distribution in tests and reports."""
    t = np.asarray(t, dtype=np.float64)
    return norm.cdf((np.log(t) - np.log1p(-t) - loc) / scale)


# Channel statistics


def fit_channel_stats(latents: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over a set of latents shaped [..., C]."""
    if not len(latents):
        raise PreconditionError("cannot fit channel statistics on an empty set")
    arrays = [np.asarray(getattr(z, "data", z), dtype=np.float64) for z in latents]
    flat = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std <= 0) or not np.all(np.isfinite(std)):
        raise DegenerateStatsError("a latent channel has zero variance")
    return mean, std


def _check_stats(mean, std, channels: int):
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (channels,) or std.shape != (channels,):
        raise DimensionError(f"channel stats must have shape ({channels},)")
    if np.any(std <= 0):
        raise DegenerateStatsError("channel std must be positive")
    return mean, std


def channel_normalize(z, mean=None, std=None) -> np.ndarray:
    """(z - mean) / std per channel; stats default to those carried by a LatentVideo."""
    data = np.asarray(getattr(z, "data", z), dtype=np.float64)
    # plain arrays and tensors carry mean()/std() methods, not statistics
    mean = getattr(z, "mean", None) if mean is None else mean
    std = getattr(z, "std", None) if std is None else std
    if mean is None or std is None or callable(mean) or callable(std):
        raise PreconditionError("channel statistics are required to normalize")
    mean, std = _check_stats(mean, std, data.shape[-1])
    return ((data - mean) / std).astype(np.float32)


def channel_denormalize(z, mean, std) -> np.ndarray:
    data = np.asarray(z, dtype=np.float64)
    mean, std = _check_stats(mean, std, data.shape[-1])
    return (data * std + mean).astype(np.float32)


# Objectives


def _velocity(fn: VelocityFn, x_t: np.ndarray, t: np.ndarray):
    out = fn(x_t, t)
    if isinstance(out, Tensor):
        if out.shape != x_t.shape:
            raise DimensionError(f"velocity prediction {out.shape} does not match input {x_t.shape}")
        return out
    out = np.asarray(out, dtype=np.float32)
    if out.shape != x_t.shape:
        raise DimensionError(f"velocity prediction {out.shape} does not match input {x_t.shape}")
    return Tensor(out)


def _frame_mask(mask, batch: int, frames: int) -> np.ndarray:
    if mask is None:
        return np.zeros((batch, frames), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, frames))
    if mask.shape != (batch, frames):
        raise DimensionError(f"frame mask {mask.shape} does not match ({batch}, {frames})")
    return mask


def training_loss(
    velocity_fn: VelocityFn,
    x0,
    rng: np.random.Generator,
    cfg: Optional[FlowConfig] = None,
    mask=None,
    t=None,
    noise=None,
) -> Tensor:
    """Velocity-regression loss on a batch of normalized latents [B, T, h, w, C].

    ``mask`` marks conditioning frames (True): they are fed clean at t=0 and
    excluded from the loss. One timestep is drawn per sample unless ``t`` fixes it.
    """
    cfg = cfg or FlowConfig()
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.ndim < 3:
        raise DimensionError(f"latent batch must be [B, T, ...], got {x0.shape}")
    b, frames = x0.shape[:2]
    mask = _frame_mask(mask, b, frames)
    if t is None:
        tokens = int(np.prod(x0.shape[1:-1]))
        t = sample_timestep(rng, cfg, tokens, size=b)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
    frame_t = np.where(mask, 0.0, t[:, None])
    x1 = rng.standard_normal(x0.shape).astype(np.float32) if noise is None else np.asarray(noise, dtype=np.float32)
    sample = noise_sample(x0, x1, frame_t)
    pred = _velocity(velocity_fn, sample.x_t, frame_t)
    weights = np.broadcast_to((~mask).reshape(b, frames, *([1] * (x0.ndim - 2))), x0.shape).astype(np.float64)
    return mse(pred, Tensor(sample.velocity), weights)


def validation_timesteps(count: int = VALIDATION_TIMESTEPS) -> np.ndarray:
    """Midpoints of ``count`` equal bins of [0, 1]."""
    return (np.arange(count) + 0.5) / count


def validation_loss(velocity_fn: VelocityFn, x0, seed: int = 0, cfg: Optional[FlowConfig] = None, mask=None) -> float:
    """Loss averaged over the fixed validation timesteps with seeded noise."""
    cfg = cfg or FlowConfig()
    rng = make_rng(seed, "flow.validation")
    noise = rng.standard_normal(np.shape(x0)).astype(np.float32)
    losses = [
        training_loss(velocity_fn, x0, rng, cfg, mask=mask, t=t, noise=noise).item()
        for t in validation_timesteps(cfg.validation_timesteps)
    ]
    return float(np.mean(losses))


# Sampling


def euler_sample(
    velocity_fn: VelocityFn,
    shape,
    rng: np.random.Generator,
    steps: int = SAMPLING_STEPS,
    mask=None,
    cond_latent=None,
    guidance_scale: float = 1.0,
    uncond_fn: Optional[VelocityFn] = None,
    progress: bool = False,
) -> np.ndarray:
    """Integrate dx/dt = v from t=1 to t=0 with ``steps`` uniform Euler steps.

    Conditioning frames (``mask`` True) are overwritten with ``cond_latent``
    before every step and in the result, and are presented to the model at t=0.
    """
    if steps < 1:
        raise PreconditionError(f"sampling needs at least one step, got {steps}")
    shape = tuple(shape)
    b, frames = shape[:2]
    mask = _frame_mask(mask, b, frames)
    if mask.any():
        if cond_latent is None:
            raise PreconditionError("conditioning frames need a conditioning latent")
        cond_latent = np.broadcast_to(np.asarray(cond_latent, dtype=np.float32), shape)
    full_mask = np.broadcast_to(mask.reshape(b, frames, *([1] * (len(shape) - 2))), shape)

    x = rng.standard_normal(shape).astype(np.float32)
    times = np.linspace(1.0, 0.0, steps + 1)
    for i in tqdm(range(steps), desc="Sampling", disable=not progress):
        if mask.any():
            x = np.where(full_mask, cond_latent, x)
        frame_t = np.where(mask, 0.0, times[i])
        v = _velocity(velocity_fn, x, frame_t).data.astype(np.float64)
        if uncond_fn is not None and guidance_scale != 1.0:
            vu = _velocity(uncond_fn, x, frame_t).data.astype(np.float64)
            v = vu + guidance_scale * (v - vu)
        x = (x.astype(np.float64) - (times[i] - times[i + 1]) * v).astype(np.float32)
    if mask.any():
        x = np.where(full_mask, cond_latent, x)
    return x


# 2-D Gaussian-mixture toy with an exact velocity field


@dataclass
class GaussianMixtureToy:
    """Isotropic Gaussian mixture; the velocity of its straight-path flow is known in closed form."""

    means: np.ndarray
    sigma: float = 0.3
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k = self.means.shape[0]
        self.weights = np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (k,) or np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ConfigError("mixture weights must be a probability vector, one per mode")
        if not self.sigma > 0:
            raise ConfigError("mixture sigma must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        modes = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[modes] + self.sigma * rng.standard_normal((n, self.dim))

    def velocity(self, x, t) -> np.ndarray:
        """E[x1 - x0 | x_t = x] for x [n, d] and t scalar or [n]."""
        x = np.asarray(x, dtype=np.float64)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))[:, None]
        var = (1.0 - t) ** 2 * self.sigma ** 2 + t ** 2  # [n, 1]
        centers = (1.0 - t)[:, :, None] * self.means[None]  # [n, 1, d] * [1, k, d]
        resid = x[:, None, :] - centers  # [n, k, d]
        log_w = np.log(self.weights)[None] - 0.5 * np.sum(resid ** 2, axis=-1) / var
        post = softmax(log_w, axis=1)  # [n, k]
        gain = (t - (1.0 - t) * self.sigma ** 2) / var  # [n, 1]
        v_k = gain[:, :, None] * resid - self.means[None]
        return np.sum(post[:, :, None] * v_k, axis=1)

    def velocity_fn(self) -> VelocityFn:
        """Adapter to the [B, T, ...] sampler convention, using T=1 and a trailing dim axis."""

        def fn(x, t):
            flat = x.reshape(-1, self.dim)
            return self.velocity(flat, np.asarray(t).reshape(-1)).reshape(x.shape)

        return fn


def mode_weights(samples, means) -> np.ndarray:
    """Fraction of samples nearest to each mode."""
    samples = np.asarray(samples, dtype=np.float64)
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    d = np.sum((samples[:, None, :] - means[None]) ** 2, axis=-1)
    counts = np.bincount(np.argmin(d, axis=1), minlength=len(means))
    return counts / max(1, len(samples))


def sliced_wasserstein(a, b, projections: int = 64, seed: int = 0) -> float:
    """Average 1-D Wasserstein-1 distance over random unit directions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"point clouds {a.shape} and {b.shape} are not comparable")
    rng = make_rng(seed, "flow.sliced_wasserstein")
    dirs = rng.standard_normal((projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([wasserstein_distance(a @ d, b @ d) for d in dirs]))


def wasserstein_1(a, b) -> float:
    """Exact Wasserstein-1 distance between two equally sized point clouds.

    Solves the optimal assignment over pairwise Euclidean costs.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"point clouds {a.shape} and {b.shape} must have the same shape")
    cost = cdist(a, b)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def sample_toy(toy_fn: VelocityFn, dim: int, n: int, steps: int, seed: int = 0) -> np.ndarray:
    """Draw ``n`` points by integrating a toy velocity field."""
    rng = make_rng(seed, "flow.toy_sample")
    return euler_sample(toy_fn, (n, 1, dim), rng, steps=steps).reshape(n, dim)


class ToyVelocityNet:
    """Small MLP velocity model for the 2-D toy: input [x, t], output v."""

    def __init__(self, dim: int = 2, width: int = 64, seed: int = 0):
        self.dim = dim
        self.net = MLP([dim + 1, width, width, dim], make_rng(seed, "flow.toy_net"))

    def predict(self, x, t) -> Tensor:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (x.shape[0],))
        return self.net(Tensor(np.concatenate([x, t[:, None]], axis=1)))

    def velocity_fn(self) -> VelocityFn:
        def fn(x, t):
            return self.predict(x, t).numpy().reshape(x.shape)

        return fn


def fit_toy(toy: GaussianMixtureToy, steps: int = 2000, batch: int = 256, lr: float = 2e-3, seed: int = 0) -> ToyVelocityNet:
    """Train a ToyVelocityNet with the straight-path objective on fresh mixture draws."""
    model = ToyVelocityNet(toy.dim, seed=seed)
    opt = Adam(model.net.parameters(), lr=lr, eps=1e-8)
    rng = make_rng(seed, "flow.toy_train")
    for step in tqdm(range(steps), desc="Toy flow", leave=False):
        x0 = toy.sample(rng, batch)
        x1 = rng.standard_normal(x0.shape)
        t = rng.uniform(0.0, 1.0, size=batch)
        x_t = (1.0 - t[:, None]) * x0 + t[:, None] * x1
        opt.zero_grad()
        loss = mse(model.predict(x_t, t), Tensor(x1 - x0))
        loss.backward()
        opt.step()
        if step % 500 == 0:
            logger.debug(f"toy flow step {step}: loss={loss.item():.4f}")
    return model
