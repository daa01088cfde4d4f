"""Confidence-adaptive prior injection for flow and diffusion samplers.

Retrieval statistics map to a guidance start time t0: high mean similarity
and low DTW dispersion give small t0 (strong pull toward the elite prior),
weak or inconsistent retrievals push t0 toward 1 (plain sampling). The
samplers then start integration from a noised interpolation of the prior at
t0 instead of pure noise. With no prior they reduce bitwise to the base
sampler under the same generator.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from .action_space import ActionChunk, canonicalize_axis_angle
from .errors import InvalidInputError, SamplingDivergenceError


@dataclasses.dataclass(frozen=True)
class GuidanceConfig:
    """Confidence chain and integrator parameters."""

    s_ref: float = 0.9992  # similarity reference point (the retrieval gate)
    s_scale: float = 5e-4  # similarity normalization scale
    c_max: float = 50.0  # clip bound on normalized similarity
    alpha: float = 1.0  # similarity weight in the confidence score
    beta: float = 0.05  # dispersion penalty in the confidence score
    gamma: float = 2.0  # sigmoid sharpness of the t0 mapping
    t_min: float = 0.3  # floor of the guidance start time
    num_steps: int = 10  # uniform integration grid resolution

    def __post_init__(self):
        if self.s_scale <= 0:
            raise InvalidInputError(f"s_scale must be positive, got {self.s_scale}")
        if self.c_max <= 0:
            raise InvalidInputError(f"c_max must be positive, got {self.c_max}")
        if not (0.0 < self.t_min < 1.0):
            raise InvalidInputError(f"t_min must lie in (0, 1), got {self.t_min}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise InvalidInputError(f"num_steps must be a positive integer, got {self.num_steps}")


@dataclasses.dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule of the denoising chain.

    alpha_bar[i] is the cumulative product for step i + 1, so alpha_bar_for(n)
    with 1-based n indexes the conventional quantity.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1 or ab.shape != betas.shape:
            raise InvalidInputError("schedule arrays must be equal-length 1-d")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise InvalidInputError("betas must lie in (0, 1)")
        if np.any(np.diff(ab) >= 0) and ab.size > 1:
            raise InvalidInputError("alpha_bar must be strictly decreasing")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise InvalidInputError("alpha_bar must lie in (0, 1]")
        expected = np.cumprod(1.0 - betas)
        if not np.allclose(ab, expected, rtol=0, atol=1e-12):
            raise InvalidInputError("alpha_bar is not the cumulative product of (1 - beta)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def linear(cls, n_steps: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02):
        if n_steps < 1:
            raise InvalidInputError("n_steps must be >= 1")
        betas = np.linspace(beta_start, beta_end, n_steps)
        return cls(betas=betas, alpha_bar=np.cumprod(1.0 - betas))

    @property
    def n_steps(self) -> int:
        return self.betas.size

    def alpha_bar_for(self, n: int) -> float:
        """Cumulative product for 1-based step n; n=0 returns 1."""
        if n == 0:
            return 1.0
        return float(self.alpha_bar[n - 1])


def normalized_similarity(mean_similarity: float, config: GuidanceConfig) -> float:
    """Shift, scale, and clip the mean retrieval similarity."""
    if not np.isfinite(mean_similarity):
        raise InvalidInputError("mean similarity must be finite")
    s = (mean_similarity - config.s_ref) / config.s_scale
    return float(np.clip(s, -config.c_max, config.c_max))


def retrieval_confidence(s_tilde: float, dtw_dispersion: float, config: GuidanceConfig) -> float:
    """Confidence score: alpha * s_tilde - beta * dispersion."""
    if dtw_dispersion < 0:
        raise InvalidInputError("dtw dispersion must be nonnegative")
    return float(config.alpha * s_tilde - config.beta * dtw_dispersion)


def guidance_start_time(confidence: float, config: GuidanceConfig) -> float:
    """Map confidence to a start time in (0, 1): t_min + (1 - t_min) * sigmoid(-gamma * c)."""
    if not np.isfinite(confidence):
        raise InvalidInputError("confidence must be finite")
    sig = 1.0 / (1.0 + math.exp(config.gamma * confidence))
    return float(config.t_min + (1.0 - config.t_min) * sig)


def start_time_from_prior(prior, config: GuidanceConfig) -> float:
    """Full chain from prior statistics to the guidance start time."""
    s_tilde = normalized_similarity(prior.mean_similarity, config)
    c = retrieval_confidence(s_tilde, prior.dtw_dispersion, config)
    return guidance_start_time(c, config)


def _snap_up(t0: float, num_steps: int) -> int:
    """Smallest grid index i with i / num_steps >= t0."""
    if not (0.0 <= t0 <= 1.0):
        raise InvalidInputError(f"t0 must lie in [0, 1], got {t0}")
    return int(math.ceil(t0 * num_steps - 1e-9))


def _finish_chunk(x: np.ndarray, horizon: int) -> ActionChunk:
    """Reshape a flat sample and restore chunk invariants.

    Rotation rows already canonical pass through bitwise; gripper commands
    are clipped to range.
    """
    arr = x.reshape(horizon, 7)
    dr = np.stack([canonicalize_axis_angle(arr[h, 3:6]) for h in range(horizon)])
    return ActionChunk(dp=arr[:, 0:3].copy(), dr=dr, g=np.clip(arr[:, 6], 0.0, 1.0))


def _flow_integrate(policy, z, x: np.ndarray, start_idx: int, config: GuidanceConfig):
    dt = 1.0 / config.num_steps
    for k in range(start_idx, 0, -1):
        t = k / config.num_steps
        x = x - dt * policy.velocity(x, t, z)
        if not np.all(np.isfinite(x)):
            raise SamplingDivergenceError(
                f"flow integration diverged at grid step {k}", step=k
            )
    return x


def guided_flow_sample(policy, z, prior, config: GuidanceConfig, rng: np.random.Generator,
                       *, horizon: int = 8, t0: Optional[float] = None) -> ActionChunk:
    """Sample a chunk by Euler integration of the policy's velocity field.

    Without a prior: integrate from pure noise at t=1 over the full uniform
    grid. With a prior: compute t0 from the confidence chain (or take the
    override), snap it up to the grid, start from the noised interpolation
    (1 - t0) * prior + t0 * eps, and integrate the remaining steps. A snapped
    t0 of 0 returns the prior chunk exactly.
    """
    dim = horizon * 7
    if prior is None:
        x = rng.standard_normal(dim)
        x = _flow_integrate(policy, z, x, config.num_steps, config)
        return _finish_chunk(x, horizon)

    flat = prior.chunk.flatten()
    if flat.size != dim:
        raise InvalidInputError(f"prior horizon {prior.chunk.horizon} != sampler horizon {horizon}")
    if t0 is None:
        t0 = start_time_from_prior(prior, config)
    start_idx = _snap_up(t0, config.num_steps)
    if start_idx == 0:
        return _finish_chunk(flat, horizon)
    t_start = start_idx / config.num_steps
    eps = rng.standard_normal(dim)
    x = (1.0 - t_start) * flat + t_start * eps
    x = _flow_integrate(policy, z, x, start_idx, config)
    return _finish_chunk(x, horizon)


def _diffusion_reverse(policy, z, x: np.ndarray, n_start: int, schedule: DiffusionSchedule,
                       rng: np.random.Generator):
    for n in range(n_start, 0, -1):
        beta = schedule.betas[n - 1]
        alpha = 1.0 - beta
        ab_n = schedule.alpha_bar_for(n)
        ab_prev = schedule.alpha_bar_for(n - 1)
        eps_hat = policy.predict_noise(x, n, z)
        mean = (x - beta / np.sqrt(1.0 - ab_n) * eps_hat) / np.sqrt(alpha)
        if n > 1:
            var = (1.0 - ab_prev) / (1.0 - ab_n) * beta
            x = mean + np.sqrt(var) * rng.standard_normal(x.shape)
        else:
            x = mean
        if not np.all(np.isfinite(x)):
            raise SamplingDivergenceError(
                f"reverse diffusion diverged at step {n}", step=n
            )
    return x


def flow_sample_batch(policy, z, batch: int, dim: int, config: GuidanceConfig,
                      rng: np.random.Generator, *, prior_flat: Optional[np.ndarray] = None,
                      t0: Optional[float] = None) -> np.ndarray:
    """Vectorized flow sampling over raw R^dim, no chunk epilogue.

    The policy's velocity must accept (batch, dim) states. Used for moment
    estimation where per-sample chunk construction would dominate runtime.
    """
    if prior_flat is None:
        x = rng.standard_normal((batch, dim))
        return _flow_integrate(policy, z, x, config.num_steps, config)
    start_idx = _snap_up(1.0 if t0 is None else t0, config.num_steps)
    if start_idx == 0:
        return np.broadcast_to(prior_flat, (batch, dim)).copy()
    t_start = start_idx / config.num_steps
    x = (1.0 - t_start) * prior_flat[None, :] + t_start * rng.standard_normal((batch, dim))
    return _flow_integrate(policy, z, x, start_idx, config)


def diffusion_sample_batch(policy, z, batch: int, dim: int, schedule: DiffusionSchedule,
                           rng: np.random.Generator, *, prior_flat: Optional[np.ndarray] = None,
                           t0: Optional[float] = None) -> np.ndarray:
    """Vectorized reverse diffusion over raw R^dim, no chunk epilogue."""
    N = schedule.n_steps
    if prior_flat is None:
        x = rng.standard_normal((batch, dim))
        return _diffusion_reverse(policy, z, x, N, schedule, rng)
    n0 = N if t0 is None else int(math.floor(t0 * N + 0.5))
    if n0 == 0:
        return np.broadcast_to(prior_flat, (batch, dim)).copy()
    ab = schedule.alpha_bar_for(n0)
    x = np.sqrt(ab) * prior_flat[None, :] + np.sqrt(1.0 - ab) * rng.standard_normal((batch, dim))
    return _diffusion_reverse(policy, z, x, n0, schedule, rng)


def guided_diffusion_sample(policy, z, prior, schedule: DiffusionSchedule,
                            config: GuidanceConfig, rng: np.random.Generator,
                            *, horizon: int = 8, t0: Optional[float] = None) -> ActionChunk:
    """Ancestral denoising with optional forward-noised prior initialization.

    Without a prior: full reverse chain from pure noise at step N. With one:
    n0 = round(t0 * N) (floored at 1 when t0 comes from the confidence
    chain), x_{n0} = sqrt(ab_n0) * prior + sqrt(1 - ab_n0) * eps, then reverse
    from n0. An explicit t0 override of 0 returns the prior chunk exactly.
    """
    dim = horizon * 7
    N = schedule.n_steps
    if prior is None:
        x = rng.standard_normal(dim)
        x = _diffusion_reverse(policy, z, x, N, schedule, rng)
        return _finish_chunk(x, horizon)

    flat = prior.chunk.flatten()
    if flat.size != dim:
        raise InvalidInputError(f"prior horizon {prior.chunk.horizon} != sampler horizon {horizon}")
    if t0 is None:
        n0 = max(1, int(math.floor(start_time_from_prior(prior, config) * N + 0.5)))
    else:
        if not (0.0 <= t0 <= 1.0):
            raise InvalidInputError(f"t0 must lie in [0, 1], got {t0}")
        n0 = int(math.floor(t0 * N + 0.5))
    if n0 == 0:
        return _finish_chunk(flat, horizon)
    ab = schedule.alpha_bar_for(n0)
    eps = rng.standard_normal(dim)
    x = np.sqrt(ab) * flat + np.sqrt(1.0 - ab) * eps
    x = _diffusion_reverse(policy, z, x, n0, schedule, rng)
    return _finish_chunk(x, horizon)
