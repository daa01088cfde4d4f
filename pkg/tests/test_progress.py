"""Oracle progress estimation and calibrated verdict noise."""

import numpy as np
import pytest

from memsteer.errors import InvalidInputError
from memsteer.memory import ProgressTrace
from memsteer.progress import (
    NoisyEstimatorConfig,
    OracleProgressEstimator,
    apply_verdict_noise,
    calibrate_flip_rates,
    cap_trace_below_threshold,
    noisy_episode_verdict,
    synthesize_success_trace,
)


class _Obs:
    def __init__(self, completion, task_id="T1"):
        self.completion = completion
        self.task_id = task_id


class _Task:
    task_id = "T1"


# -- oracle estimator ---------------------------------------------------------


def test_oracle_no_change_is_zero():
    est = OracleProgressEstimator()
    assert est.estimate(_Obs(0.3), _Obs(0.3), _Task()) == 0.0


def test_oracle_relative_remaining_progress():
    est = OracleProgressEstimator()
    assert abs(est.estimate(_Obs(0.0), _Obs(0.5), _Task()) - 0.5) < 1e-12
    assert abs(est.estimate(_Obs(0.5), _Obs(1.0), _Task()) - 1.0) < 1e-12
    # regression 0.8 -> 0.6 lands exactly on the clamp boundary
    assert est.estimate(_Obs(0.8), _Obs(0.6), _Task()) == -1.0


def test_oracle_inverts_the_accumulation_recurrence():
    from memsteer.memory import accumulate_progress

    est = OracleProgressEstimator()
    rng = np.random.default_rng(0)
    for _ in range(200):
        g_prev = float(rng.uniform(0.0, 0.999))
        g_now = float(rng.uniform(g_prev * 2.0 - 1.0 if g_prev > 0.5 else 0.0, 1.0))
        c = est.estimate(_Obs(g_prev), _Obs(g_now), _Task())
        assert abs(accumulate_progress(g_prev, c) - g_now) < 1e-12


def test_oracle_task_mismatch_rejected():
    est = OracleProgressEstimator()
    with pytest.raises(InvalidInputError):
        est.estimate(_Obs(0.1, task_id="T2"), _Obs(0.2), _Task())


def test_oracle_range_validation():
    est = OracleProgressEstimator()
    with pytest.raises(InvalidInputError):
        est.estimate(_Obs(-0.1), _Obs(0.2), _Task())
    with pytest.raises(InvalidInputError):
        est.estimate(_Obs(0.1), _Obs(1.2), _Task())


# -- verdict noise ------------------------------------------------------------


def test_noisy_config_validation():
    NoisyEstimatorConfig(0.1, 0.2)
    with pytest.raises(InvalidInputError):
        NoisyEstimatorConfig(-0.1, 0.2)
    with pytest.raises(InvalidInputError):
        NoisyEstimatorConfig(0.1, 1.2)
    with pytest.raises(InvalidInputError):
        NoisyEstimatorConfig(0.1, 0.2, seed=-1)


def test_verdict_noise_identity_and_inversion():
    keep = NoisyEstimatorConfig(0.0, 0.0)
    flip = NoisyEstimatorConfig(1.0, 1.0)
    for ep in range(50):
        for truth in (True, False):
            assert noisy_episode_verdict(truth, keep, ep) == truth
            assert noisy_episode_verdict(truth, flip, ep) != truth


def test_verdict_noise_reproducible():
    cfg = NoisyEstimatorConfig(0.3, 0.4, seed=9)
    for ep in range(100):
        a = noisy_episode_verdict(True, cfg, ep)
        b = noisy_episode_verdict(True, cfg, ep)
        assert a == b
    with pytest.raises(InvalidInputError):
        noisy_episode_verdict(True, cfg, -1)


def test_calibrate_flip_rates_algebra():
    p, precision, recall = 0.6, 0.970, 0.678
    fts, ftf = calibrate_flip_rates(p, precision, recall)
    assert abs(ftf - (1.0 - recall)) < 1e-12
    # the rates reproduce the targets analytically
    tp = p * recall
    fp = (1.0 - p) * fts
    assert abs(tp / (tp + fp) - precision) < 1e-12
    with pytest.raises(InvalidInputError):
        calibrate_flip_rates(0.0)
    with pytest.raises(InvalidInputError):
        calibrate_flip_rates(0.9, precision=0.1, recall=1.0)  # needs fts > 1


def test_realized_precision_recall_converge():
    p = 0.5
    fts, ftf = calibrate_flip_rates(p, precision=0.970, recall=0.678)
    cfg = NoisyEstimatorConfig(fts, ftf, seed=0)
    rng = np.random.default_rng(0)
    truth = rng.random(5000) < p
    verdicts = np.array(
        [noisy_episode_verdict(bool(t), cfg, i) for i, t in enumerate(truth)])
    tp = np.sum(truth & verdicts)
    precision = tp / np.sum(verdicts)
    recall = tp / np.sum(truth)
    assert abs(precision - 0.970) <= 0.02
    assert abs(recall - 0.678) <= 0.03


# -- trace rewriting ----------------------------------------------------------


def _trace(scores, eta=0.95):
    from memsteer.memory import accumulate_progress

    taus = tuple(5 * i for i in range(len(scores) + 1))
    acc = [0.0]
    for c in scores:
        acc.append(accumulate_progress(acc[-1], c))
    peak = int(np.argmax(acc))
    return ProgressTrace(
        eval_timesteps=taus,
        interval_scores=tuple(scores),
        accumulated=tuple(acc),
        completion=float(max(acc)),
        peak_timestep=taus[peak],
        success=max(acc) >= eta,
    )


def test_synthesize_success_trace_ramp():
    trace = synthesize_success_trace((0, 5, 10, 15), eta=0.95)
    assert trace.success
    assert trace.peak_timestep == 15  # peak at the end: prefix keeps everything
    assert abs(trace.completion - 0.95) < 1e-12
    assert np.allclose(np.diff(trace.accumulated), 0.95 / 3.0, atol=1e-12)
    # scores and accumulation agree with the shared recurrence
    from memsteer.memory import accumulate_progress

    v = 0.0
    for c, expect in zip(trace.interval_scores, trace.accumulated[1:]):
        v = accumulate_progress(v, c)
        assert abs(v - expect) < 1e-12
    with pytest.raises(InvalidInputError):
        synthesize_success_trace((0,), eta=0.95)


def test_cap_trace_below_threshold():
    high = _trace([0.8, 0.9])
    capped = cap_trace_below_threshold(high, eta=0.95)
    assert not capped.success
    assert capped.completion < 0.95
    assert capped.peak_timestep == high.peak_timestep
    low = _trace([0.2, 0.1])
    kept = cap_trace_below_threshold(low, eta=0.95)
    assert np.allclose(kept.accumulated, low.accumulated, atol=1e-12)


def test_apply_verdict_noise_paths():
    eta = 0.95
    success = _trace([0.8, 0.9], eta)
    failure = _trace([0.2, 0.1], eta)
    keep = NoisyEstimatorConfig(0.0, 0.0)
    assert apply_verdict_noise(success, keep, 3, eta) is success
    flip = NoisyEstimatorConfig(1.0, 1.0)
    flipped_down = apply_verdict_noise(success, flip, 3, eta)
    assert not flipped_down.success and flipped_down.completion < eta
    flipped_up = apply_verdict_noise(failure, flip, 3, eta)
    assert flipped_up.success and flipped_up.completion >= eta - 1e-12
    assert flipped_up.peak_timestep == failure.eval_timesteps[-1]
