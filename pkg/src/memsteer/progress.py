"""Interval progress estimators and verdict noise.

The oracle estimator reads the simulator's ground-truth completion fraction
and reports relative remaining progress, which makes the saturating
accumulation recurrence its exact inverse: accumulated progress reconstructs
the ground-truth fraction at every evaluation step. The noisy variant keeps
interval scoring intact but flips episode-level verdicts at configured rates,
modeling an imperfect learned critic.
"""

from __future__ import annotations

import dataclasses
from typing import Protocol

import numpy as np

from .errors import InvalidInputError
from .memory import ProgressTrace


class ProgressEstimator(Protocol):
    def estimate(self, o_prev, o_now, task) -> float:
        """Signed fraction of remaining progress made over the interval."""
        ...


@dataclasses.dataclass(frozen=True)
class OracleProgressEstimator:
    """Relative remaining progress from ground-truth completion fractions."""

    def estimate(self, o_prev, o_now, task) -> float:
        for obs in (o_prev, o_now):
            if getattr(obs, "task_id", task.task_id) != task.task_id:
                raise InvalidInputError(
                    f"observation from task {obs.task_id!r}, expected {task.task_id!r}"
                )
        g_prev = float(o_prev.completion)
        g_now = float(o_now.completion)
        if not (0.0 <= g_prev <= 1.0 and 0.0 <= g_now <= 1.0):
            raise InvalidInputError("completion fractions must lie in [0, 1]")
        remaining = 1.0 - g_prev
        if remaining < 1e-12:
            return float(np.clip(g_now - g_prev, -1.0, 1.0))
        return float(np.clip((g_now - g_prev) / remaining, -1.0, 1.0))


@dataclasses.dataclass(frozen=True)
class NoisyEstimatorConfig:
    """Episode-level verdict corruption rates, seeded for reproducibility."""

    flip_to_success_rate: float  # chance a failed episode is marked successful
    flip_to_failure_rate: float  # chance a successful episode is marked failed
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_to_success_rate", "flip_to_failure_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidInputError(f"{name} must lie in [0, 1], got {v}")
        if self.seed < 0:
            raise InvalidInputError("seed must be nonnegative")


def noisy_episode_verdict(true_success: bool, config: NoisyEstimatorConfig, episode_id: int) -> bool:
    """Deterministically corrupted verdict for one episode.

    The flip draw depends only on (config.seed, episode_id), so repeated calls
    agree and runs are reproducible.
    """
    if episode_id < 0:
        raise InvalidInputError("episode_id must be nonnegative")
    rng = np.random.default_rng([config.seed, episode_id])
    u = float(rng.random())
    if true_success:
        return u >= config.flip_to_failure_rate
    return u < config.flip_to_success_rate


def calibrate_flip_rates(base_success_rate: float, precision: float = 0.970,
                         recall: float = 0.678) -> tuple[float, float]:
    """Solve the flip rates that realize a target precision and recall.

    With base rate p, recall r and precision q:
      recall  = 1 - flip_to_failure
      precision = p*r / (p*r + (1-p)*flip_to_success)
    Returns (flip_to_success_rate, flip_to_failure_rate).
    """
    p = base_success_rate
    if not (0.0 < p < 1.0):
        raise InvalidInputError(f"base success rate must lie in (0, 1), got {p}")
    if not (0.0 < precision <= 1.0 and 0.0 < recall <= 1.0):
        raise InvalidInputError("precision and recall must lie in (0, 1]")
    flip_to_failure = 1.0 - recall
    flip_to_success = p * recall * (1.0 - precision) / (precision * (1.0 - p))
    if flip_to_success > 1.0:
        raise InvalidInputError(
            f"targets unreachable at base rate {p}: required flip-to-success {flip_to_success:.3f} > 1"
        )
    return float(flip_to_success), float(flip_to_failure)


def synthesize_success_trace(eval_timesteps, eta: float) -> ProgressTrace:
    """Trace for a verdict flipped to success: a uniform ramp reaching eta.

    The peak sits at the final evaluation step, so a downstream prefix commit
    ingests the whole episode, modeling a false-positive critic.
    """
    taus = tuple(eval_timesteps)
    M = len(taus) - 1
    if M < 1:
        raise InvalidInputError("need at least one evaluation interval")
    accumulated = [eta * m / M for m in range(M + 1)]
    scores = []
    for m in range(1, M + 1):
        prev = accumulated[m - 1]
        scores.append((accumulated[m] - prev) / (1.0 - prev))
    return ProgressTrace(
        eval_timesteps=taus,
        interval_scores=tuple(scores),
        accumulated=tuple(accumulated),
        completion=float(accumulated[-1]),
        peak_timestep=taus[-1],
        success=True,
    )


def cap_trace_below_threshold(trace: ProgressTrace, eta: float) -> ProgressTrace:
    """Trace for a verdict flipped to failure: completion capped below eta."""
    ceiling = eta * (1.0 - 1e-9)
    if trace.completion <= ceiling:
        scale = 1.0
    else:
        scale = ceiling / trace.completion
    accumulated = tuple(v * scale for v in trace.accumulated)
    scores = []
    for m in range(1, len(accumulated)):
        prev = accumulated[m - 1]
        scores.append((accumulated[m] - prev) / (1.0 - prev))
    return ProgressTrace(
        eval_timesteps=trace.eval_timesteps,
        interval_scores=tuple(scores),
        accumulated=accumulated,
        completion=float(max(accumulated)),
        peak_timestep=trace.peak_timestep,
        success=False,
    )


def apply_verdict_noise(trace: ProgressTrace, config: NoisyEstimatorConfig, episode_id: int,
                        eta: float) -> ProgressTrace:
    """Corrupt an oracle trace's verdict per the configured flip rates."""
    verdict = noisy_episode_verdict(trace.success, config, episode_id)
    if verdict == trace.success:
        return trace
    if verdict:
        return synthesize_success_trace(trace.eval_timesteps, eta)
    return cap_trace_below_threshold(trace, eta)
