"""Frozen generative base policy: an analytic Gaussian mixture over chunks.

The conditioning input of both sampler heads is a MixtureSpec built per
decision from the scripted planners: the expert plan is the dominant mode
and the distractor plans carry the error mass. Velocity field and noise
predictor are exact closed forms, so sampler tests have analytic ground
truth and the policy itself never trains or drifts.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .errors import InvalidInputError
from .guidance import DiffusionSchedule
from .simenv import (
    DEFAULT_HORIZON,
    Observation,
    TaskSpec,
    expert_chunk,
    overshoot_chunk,
    wrong_target_chunk,
)


@dataclasses.dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture over flattened action chunks."""

    means: np.ndarray  # (n_modes, dim) mode centers
    masses: np.ndarray  # (n_modes,) mixture weights, sum to 1
    sigma: float  # shared per-coordinate scale

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if means.ndim != 2 or means.shape[0] < 1:
            raise InvalidInputError("means must be (n_modes, dim) with n_modes >= 1")
        if masses.shape != (means.shape[0],):
            raise InvalidInputError("one mass per mode required")
        if np.any(masses < 0) or abs(float(masses.sum()) - 1.0) > 1e-9:
            raise InvalidInputError("masses must be nonnegative and sum to 1")
        if not np.all(np.isfinite(means)):
            raise InvalidInputError("mode means must be finite")
        if self.sigma <= 0:
            raise InvalidInputError(f"sigma must be positive, got {self.sigma}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "masses", masses)

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _responsibilities(x2: np.ndarray, centers: np.ndarray, var: float,
                      masses: np.ndarray) -> np.ndarray:
    """Posterior mode weights at each row of x2 under shared isotropic var."""
    diff = x2[:, None, :] - centers[None, :, :]
    logits = np.log(np.maximum(masses, 1e-300))[None, :] - np.einsum(
        "bkd,bkd->bk", diff, diff) / (2.0 * var)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def mixture_velocity(x: np.ndarray, t: float, z: MixtureSpec) -> np.ndarray:
    """Marginal velocity of the interpolant x_t = (1-t) x0 + t eps.

    Per mode the marginal of x_t is normal with mean (1-t) mu and variance
    (1-t)^2 sigma^2 + t^2; the velocity is the responsibility-weighted
    E[eps - x0 | x_t]. Accepts a single state (dim,) or a batch (b, dim).
    """
    if not (0.0 < t <= 1.0):
        raise InvalidInputError(f"t must lie in (0, 1], got {t}")
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("state must be finite")
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    s2 = (1.0 - t) ** 2 * z.sigma ** 2 + t ** 2
    w = _responsibilities(x2, (1.0 - t) * z.means, s2, z.masses)
    mu_bar = w @ z.means
    coef = (t - (1.0 - t) * z.sigma ** 2) / s2
    v = coef * (x2 - (1.0 - t) * mu_bar) - mu_bar
    return v[0] if single else v


def mixture_eps_predictor(x: np.ndarray, n: int, z: MixtureSpec,
                          schedule: DiffusionSchedule) -> np.ndarray:
    """Exact posterior noise under the forward-noised mixture at step n."""
    if not (1 <= n <= schedule.n_steps):
        raise InvalidInputError(f"n must lie in [1, {schedule.n_steps}], got {n}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    ab = schedule.alpha_bar_for(n)
    var = ab * z.sigma ** 2 + 1.0 - ab
    w = _responsibilities(x2, np.sqrt(ab) * z.means, var, z.masses)
    mu_bar = w @ z.means
    eps = (np.sqrt(1.0 - ab) / var) * (x2 - np.sqrt(ab) * mu_bar)
    return eps[0] if single else eps


class FlowPolicy:
    """Velocity-field head of the frozen policy."""

    def velocity(self, x, t, z: MixtureSpec):
        return mixture_velocity(x, t, z)


class DiffusionPolicy:
    """Noise-prediction head of the frozen policy."""

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule

    def predict_noise(self, x, n, z: MixtureSpec):
        return mixture_eps_predictor(x, n, z, self.schedule)


@dataclasses.dataclass(frozen=True)
class CompetenceParams:
    """Knobs controlling how competent the frozen policy is."""

    p_err: float = 0.3  # total mass on distractor modes
    sigma: float = 0.05  # mixture scale in normalized action units
    overshoot_factor: float = 1.3  # translation scaling of the overshoot mode
    wrong_share: float = 0.5  # fraction of p_err on the wrong-target mode

    def __post_init__(self):
        if not (0.0 <= self.p_err <= 1.0):
            raise InvalidInputError(f"p_err must lie in [0, 1], got {self.p_err}")
        if self.sigma <= 0:
            raise InvalidInputError("sigma must be positive")
        if self.overshoot_factor <= 0:
            raise InvalidInputError("overshoot_factor must be positive")
        if not (0.0 <= self.wrong_share <= 1.0):
            raise InvalidInputError(
                f"wrong_share must lie in [0, 1], got {self.wrong_share}")


def competence_profile(task: TaskSpec, observation: Observation,
                       params: CompetenceParams = CompetenceParams(),
                       horizon: int = DEFAULT_HORIZON) -> MixtureSpec:
    """Mixture the policy samples from at this decision point.

    Expert mode at mass 1 - p_err; wrong-target and overshoot distractors
    split p_err by wrong_share. Zero-mass modes are dropped, so p_err = 0
    yields the pure expert and p_err = 1 pure distractors.
    """
    candidates = [
        (expert_chunk(task, observation, horizon), 1.0 - params.p_err),
        (wrong_target_chunk(task, observation, horizon),
         params.p_err * params.wrong_share),
        (overshoot_chunk(task, observation, horizon, params.overshoot_factor),
         params.p_err * (1.0 - params.wrong_share)),
    ]
    means = [c.flatten() for c, m in candidates if m > 1e-12]
    masses = [m for _, m in candidates if m > 1e-12]
    return MixtureSpec(
        means=np.stack(means),
        masses=np.asarray(masses) / float(np.sum(masses)),
        sigma=params.sigma,
    )
