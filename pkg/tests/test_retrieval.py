"""Key extraction, gated retrieval, consistency filtering, prior assembly."""

import numpy as np
import pytest

from memsteer.action_space import aggregate_chunks
from memsteer.errors import DegenerateKeyError, InvalidInputError
from memsteer.memory import MemoryEntry, RetrievalKey, SuccessMemory
from memsteer.retrieval import (
    STAGE_CONSISTENCY_FILTERED,
    STAGE_SIMILARITY_GATED,
    Candidate,
    CandidateSet,
    EliteActionPrior,
    KeyProjector,
    RetrievalConfig,
    build_elite_prior,
    build_prior,
    consistency_filter,
    dtw_distance,
    extract_key,
    retrieve,
    softmax_weights,
)

from helpers import dtw_cost_matrix, dtw_enumerate, perturbed_chunk, random_chunk

KEY_DIM = 8


def _key(theta, i=0, j=1):
    """Unit key in the (e_i, e_j) plane; cosine to _key(0) is cos(theta)."""
    v = np.zeros(KEY_DIM)
    v[i] = np.cos(theta)
    v[j] = np.sin(theta)
    return RetrievalKey(v)


def _entry(key, chunk, episode=0, timestep=0, task="T1"):
    return MemoryEntry(key=key, chunk=chunk, episode_id=episode, timestep=timestep,
                       task_id=task)


def _memory_with(entries):
    mem = SuccessMemory(key_dim=KEY_DIM, horizon=entries[0].chunk.horizon,
                        capacity=None)
    for e in entries:
        mem.add(e)
    return mem


class _Obs:
    def __init__(self, features):
        self.feature_vector = np.asarray(features, dtype=np.float64)


# -- config and projector -----------------------------------------------------


def test_retrieval_config_validation():
    RetrievalConfig()
    for bad in (dict(k=0), dict(gamma_sim=1.0), dict(tau=0.0), dict(mad_lambda=0.0),
                dict(rotation_cost_weight=-1.0)):
        with pytest.raises(InvalidInputError):
            RetrievalConfig(**bad)


def test_projector_frozen_and_seeded():
    a = KeyProjector(feature_dim=6, key_dim=4, seed=3)
    b = KeyProjector(feature_dim=6, key_dim=4, seed=3)
    assert np.array_equal(a.matrix, b.matrix)
    c = KeyProjector(feature_dim=6, key_dim=4, seed=4)
    assert not np.array_equal(a.matrix, c.matrix)
    with pytest.raises(InvalidInputError):
        KeyProjector(feature_dim=0, key_dim=4)
    with pytest.raises(InvalidInputError):
        KeyProjector(feature_dim=6, key_dim=4, noise_scale=-1e-3)


def test_extract_key_unit_norm_and_noise():
    rng = np.random.default_rng(0)
    proj = KeyProjector(feature_dim=6, key_dim=4, noise_scale=1e-3, seed=1)
    obs = _Obs(rng.normal(size=6))
    k1 = extract_key(obs, proj)
    k2 = extract_key(obs, proj)
    assert abs(np.linalg.norm(k1.values) - 1.0) < 1e-9
    # per-call noise: same observation, different key, but nearly aligned
    assert not np.array_equal(k1.values, k2.values)
    assert float(k1.values @ k2.values) > 0.999

    clean = KeyProjector(feature_dim=6, key_dim=4, noise_scale=0.0, seed=1)
    assert np.array_equal(extract_key(obs, clean).values,
                          extract_key(obs, clean).values)


def test_extract_key_errors():
    proj = KeyProjector(feature_dim=6, key_dim=4, seed=0)
    with pytest.raises(InvalidInputError):
        extract_key(_Obs(np.ones(5)), proj)
    with pytest.raises(DegenerateKeyError):
        extract_key(_Obs(np.zeros(6)), proj)


# -- candidate containers -----------------------------------------------------


def test_candidate_set_requires_descending_order():
    rng = np.random.default_rng(1)
    c = random_chunk(rng, horizon=2)
    lo = Candidate(entry=_entry(_key(0.3), c), uid=0, similarity=0.90)
    hi = Candidate(entry=_entry(_key(0.0), c), uid=1, similarity=0.99)
    CandidateSet(candidates=(hi, lo), stage=STAGE_SIMILARITY_GATED)
    with pytest.raises(InvalidInputError):
        CandidateSet(candidates=(lo, hi), stage=STAGE_SIMILARITY_GATED)


def test_elite_prior_validation():
    rng = np.random.default_rng(2)
    chunk = random_chunk(rng, horizon=2)
    EliteActionPrior(chunk=chunk, mean_similarity=0.99, dtw_dispersion=0.0, support=1)
    with pytest.raises(InvalidInputError):
        EliteActionPrior(chunk=chunk, mean_similarity=0.99, dtw_dispersion=0.0, support=0)
    with pytest.raises(InvalidInputError):
        EliteActionPrior(chunk=chunk, mean_similarity=0.99, dtw_dispersion=-0.1, support=2)
    with pytest.raises(InvalidInputError):
        # one survivor cannot disagree with itself
        EliteActionPrior(chunk=chunk, mean_similarity=0.99, dtw_dispersion=0.5, support=1)


# -- retrieve -----------------------------------------------------------------


def test_retrieve_empty_memory():
    mem = SuccessMemory(key_dim=KEY_DIM, horizon=2, capacity=None)
    out = retrieve(mem.snapshot(), _key(0.0), RetrievalConfig())
    assert len(out) == 0 and out.stage == STAGE_SIMILARITY_GATED


def test_retrieve_key_dim_mismatch():
    rng = np.random.default_rng(3)
    mem = _memory_with([_entry(_key(0.0), random_chunk(rng, horizon=2))])
    bad = RetrievalKey(np.eye(KEY_DIM + 1)[0])
    with pytest.raises(InvalidInputError):
        retrieve(mem.snapshot(), bad, RetrievalConfig())


def test_retrieve_hard_gate_and_order():
    rng = np.random.default_rng(4)
    chunk = random_chunk(rng, horizon=2)
    # cosines to the query: 1.0, ~0.995, ~0.98, ~0.921
    thetas = [0.0, 0.1, 0.2, 0.4]
    mem = _memory_with([_entry(_key(t), chunk, episode=i) for i, t in enumerate(thetas)])
    cfg = RetrievalConfig(k=10, gamma_sim=0.99)
    out = retrieve(mem.snapshot(), _key(0.0), cfg)
    assert len(out) == 2
    sims = [c.similarity for c in out.candidates]
    assert sims == sorted(sims, reverse=True)
    assert out.candidates[0].entry.episode_id == 0
    assert out.candidates[1].entry.episode_id == 1
    assert all(s >= cfg.gamma_sim for s in sims)


def test_retrieve_top_k_limits_scan():
    rng = np.random.default_rng(5)
    chunk = random_chunk(rng, horizon=2)
    thetas = np.linspace(0.0, 0.05, 8)  # all pass a loose gate
    mem = _memory_with([_entry(_key(t), chunk, episode=i) for i, t in enumerate(thetas)])
    cfg = RetrievalConfig(k=3, gamma_sim=0.9)
    out = retrieve(mem.snapshot(), _key(0.0), cfg)
    assert len(out) == 3
    assert [c.entry.episode_id for c in out.candidates] == [0, 1, 2]


def test_retrieve_recency_tiebreak():
    rng = np.random.default_rng(6)
    chunk = random_chunk(rng, horizon=2)
    # five identical keys: similarity ties resolve toward newest insertions
    mem = _memory_with([_entry(_key(0.0), chunk, episode=i) for i in range(5)])
    cfg = RetrievalConfig(k=2, gamma_sim=0.9)
    out = retrieve(mem.snapshot(), _key(0.0), cfg)
    assert [c.entry.episode_id for c in out.candidates] == [4, 3]


def test_retrieve_task_filter():
    rng = np.random.default_rng(7)
    chunk = random_chunk(rng, horizon=2)
    mem = _memory_with(
        [_entry(_key(0.0), chunk, episode=0, task="T1"),
         _entry(_key(0.0), chunk, episode=1, task="T2"),
         _entry(_key(0.01), chunk, episode=2, task="T1")])
    cfg = RetrievalConfig(k=10, gamma_sim=0.9)
    snap = mem.snapshot()
    mine = retrieve(snap, _key(0.0), cfg, task_id="T1")
    assert [c.entry.episode_id for c in mine.candidates] == [0, 2]
    other = retrieve(snap, _key(0.0), cfg, task_id="T3")
    assert len(other) == 0
    # the task-filtered scan agrees with an unfiltered scan minus foreign rows
    both = retrieve(snap, _key(0.0), cfg)
    kept = [c.entry.episode_id for c in both.candidates if c.entry.task_id == "T1"]
    assert kept == [c.entry.episode_id for c in mine.candidates]


# -- DTW distance -------------------------------------------------------------


def test_dtw_distance_matches_path_enumeration():
    rng = np.random.default_rng(8)
    cfg = RetrievalConfig(rotation_cost_weight=1.0, gripper_cost_weight=0.25)
    for _ in range(25):
        a = random_chunk(rng, horizon=int(rng.integers(1, 5)))
        b = random_chunk(rng, horizon=int(rng.integers(1, 5)))
        cost = dtw_cost_matrix(a, b, cfg.rotation_cost_weight, cfg.gripper_cost_weight)
        assert abs(dtw_distance(a, b, cfg) - dtw_enumerate(cost)) < 1e-9


def test_dtw_distance_identity_and_symmetry():
    rng = np.random.default_rng(9)
    cfg = RetrievalConfig()
    a = random_chunk(rng, horizon=4)
    b = random_chunk(rng, horizon=4)
    assert dtw_distance(a, a, cfg) < 1e-12
    assert abs(dtw_distance(a, b, cfg) - dtw_distance(b, a, cfg)) < 1e-9


def test_dtw_cost_weights_scale_components():
    rng = np.random.default_rng(10)
    a = random_chunk(rng, horizon=3)
    b = random_chunk(rng, horizon=3)
    no_rot = RetrievalConfig(rotation_cost_weight=1e-12, gripper_cost_weight=0.25)
    lots_rot = RetrievalConfig(rotation_cost_weight=5.0, gripper_cost_weight=0.25)
    assert dtw_distance(a, b, no_rot) < dtw_distance(a, b, lots_rot)


# -- softmax weights ----------------------------------------------------------


def test_softmax_weights_two_point_values():
    w = softmax_weights(np.array([0.9992, 0.9987]), tau=0.05)
    assert abs(w.values[0] - 0.50250) < 1e-5
    assert abs(w.values[1] - 0.49750) < 1e-5
    assert abs(w.values.sum() - 1.0) < 1e-12


def test_softmax_weights_properties():
    w = softmax_weights(np.full(5, 0.7), tau=0.05)
    assert np.allclose(w.values, 0.2, atol=1e-12)
    sharp = softmax_weights(np.array([0.9, 0.5]), tau=1e-3)
    assert sharp.values[0] > 1.0 - 1e-12
    with pytest.raises(InvalidInputError):
        softmax_weights(np.array([]), tau=0.05)
    with pytest.raises(InvalidInputError):
        softmax_weights(np.array([[0.1]]), tau=0.05)
    with pytest.raises(InvalidInputError):
        softmax_weights(np.array([0.1]), tau=0.0)


# -- consistency filter -------------------------------------------------------


def _gated(cands):
    return CandidateSet(candidates=tuple(cands), stage=STAGE_SIMILARITY_GATED)


def test_filter_rejects_wrong_stage():
    with pytest.raises(InvalidInputError):
        consistency_filter(
            CandidateSet(candidates=(), stage=STAGE_CONSISTENCY_FILTERED),
            RetrievalConfig())


def test_filter_small_sets_pass_through():
    rng = np.random.default_rng(11)
    cfg = RetrievalConfig()
    empty = consistency_filter(_gated([]), cfg)
    assert len(empty) == 0 and empty.stage == STAGE_CONSISTENCY_FILTERED

    a = random_chunk(rng, horizon=3)
    one = consistency_filter(
        _gated([Candidate(entry=_entry(_key(0.0), a), uid=0, similarity=0.999)]), cfg)
    assert len(one) == 1 and one.candidates[0].inconsistency == 0.0

    b = random_chunk(rng, horizon=3)
    two = consistency_filter(
        _gated([Candidate(entry=_entry(_key(0.0), a), uid=0, similarity=0.999),
                Candidate(entry=_entry(_key(0.01), b), uid=1, similarity=0.998)]), cfg)
    assert len(two) == 2
    d = dtw_distance(a, b, cfg)
    for c in two.candidates:
        assert abs(c.inconsistency - d) < 1e-9


def test_filter_drops_the_outlier():
    rng = np.random.default_rng(12)
    cfg = RetrievalConfig(mad_lambda=3.0)
    base = random_chunk(rng, horizon=4)
    cluster = [base] + [perturbed_chunk(base, rng, 0.01) for _ in range(3)]
    stray = random_chunk(rng, horizon=4)
    cands = [Candidate(entry=_entry(_key(0.001 * i), ch), uid=i, similarity=0.9999 - 1e-5 * i)
             for i, ch in enumerate(cluster + [stray])]
    out = consistency_filter(_gated(cands), cfg)
    kept = {c.uid for c in out.candidates}
    assert kept == {0, 1, 2, 3}
    assert all(c.inconsistency is not None and c.inconsistency >= 0.0
               for c in out.candidates)


def test_filter_zero_mad_keeps_everything():
    rng = np.random.default_rng(13)
    cfg = RetrievalConfig()
    chunk = random_chunk(rng, horizon=3)
    cands = [Candidate(entry=_entry(_key(0.0), chunk), uid=i, similarity=0.999)
             for i in range(5)]
    out = consistency_filter(_gated(cands), cfg)
    assert len(out) == 5
    assert all(c.inconsistency == 0.0 for c in out.candidates)


def test_filter_always_keeps_most_consistent():
    rng = np.random.default_rng(14)
    cfg = RetrievalConfig(mad_lambda=1e-9)  # harshest admissible cut
    chunks = [random_chunk(rng, horizon=3) for _ in range(6)]
    cands = [Candidate(entry=_entry(_key(0.0), ch), uid=i, similarity=0.999)
             for i, ch in enumerate(chunks)]
    out = consistency_filter(_gated(cands), cfg)
    assert len(out) >= 1
    full_r = {c.uid: c.inconsistency for c in consistency_filter(
        _gated(cands), RetrievalConfig(mad_lambda=1e9)).candidates}
    best = min(full_r, key=full_r.get)
    assert best in {c.uid for c in out.candidates}


def test_filter_cache_reuse_is_transparent():
    rng = np.random.default_rng(15)
    cfg = RetrievalConfig()
    chunks = [random_chunk(rng, horizon=3) for _ in range(4)]
    cands = [Candidate(entry=_entry(_key(0.0), ch), uid=i, similarity=0.999)
             for i, ch in enumerate(chunks)]
    cache = {}
    first = consistency_filter(_gated(cands), cfg, dtw_cache=cache)
    assert len(cache) == 6  # all pairwise distances recorded
    second = consistency_filter(_gated(cands), cfg, dtw_cache=cache)
    assert [c.uid for c in first.candidates] == [c.uid for c in second.candidates]
    assert all(abs(a.inconsistency - b.inconsistency) < 1e-12
               for a, b in zip(first.candidates, second.candidates))
    for (ua, ub), d in cache.items():
        assert ua < ub
        i, j = [c.uid for c in cands].index(ua), [c.uid for c in cands].index(ub)
        assert abs(d - dtw_distance(chunks[i], chunks[j], cfg)) < 1e-9


# -- elite prior --------------------------------------------------------------


def test_build_elite_prior_stage_and_empty():
    cfg = RetrievalConfig()
    with pytest.raises(InvalidInputError):
        build_elite_prior(_gated([]), cfg)
    empty = CandidateSet(candidates=(), stage=STAGE_CONSISTENCY_FILTERED)
    assert build_elite_prior(empty, cfg) is None


def test_build_elite_prior_single_survivor():
    rng = np.random.default_rng(16)
    cfg = RetrievalConfig()
    chunk = random_chunk(rng, horizon=3)
    cand = Candidate(entry=_entry(_key(0.0), chunk), uid=0, similarity=0.9995,
                     inconsistency=0.0)
    prior = build_elite_prior(
        CandidateSet(candidates=(cand,), stage=STAGE_CONSISTENCY_FILTERED), cfg)
    assert prior.support == 1
    assert prior.chunk is chunk
    assert prior.dtw_dispersion == 0.0
    assert abs(prior.mean_similarity - 0.9995) < 1e-12


def test_build_elite_prior_statistics():
    rng = np.random.default_rng(17)
    cfg = RetrievalConfig(tau=0.05)
    base = random_chunk(rng, horizon=3)
    chunks = [base] + [perturbed_chunk(base, rng, 0.05) for _ in range(2)]
    sims = [0.9995, 0.9993, 0.9992]
    incons = [0.12, 0.15, 0.2]
    cands = tuple(
        Candidate(entry=_entry(_key(0.0), ch), uid=i, similarity=s, inconsistency=r)
        for i, (ch, s, r) in enumerate(zip(chunks, sims, incons)))
    prior = build_elite_prior(
        CandidateSet(candidates=cands, stage=STAGE_CONSISTENCY_FILTERED), cfg)
    assert prior.support == 3
    assert abs(prior.mean_similarity - np.mean(sims)) < 1e-12
    assert abs(prior.dtw_dispersion - np.std(incons)) < 1e-12
    expect = aggregate_chunks(chunks, softmax_weights(np.array(sims), cfg.tau))
    assert np.allclose(prior.chunk.flatten(), expect.flatten(), atol=1e-12)


# -- full pipeline ------------------------------------------------------------


def test_build_prior_end_to_end():
    rng = np.random.default_rng(18)
    cfg = RetrievalConfig(k=10, gamma_sim=0.99)
    base = random_chunk(rng, horizon=4)
    near = [_entry(_key(0.01 * i), perturbed_chunk(base, rng, 0.02), episode=i)
            for i in range(4)]
    far = [_entry(_key(1.2 + 0.01 * i), random_chunk(rng, horizon=4), episode=10 + i)
           for i in range(3)]
    mem = _memory_with(near + far)
    prior = build_prior(mem.snapshot(), _key(0.0), cfg)
    assert prior is not None
    assert prior.support == 4  # far keys never pass the gate
    assert prior.mean_similarity >= cfg.gamma_sim

    # a query aligned with nothing comes back empty
    assert build_prior(mem.snapshot(), _key(0.0, i=2, j=3), cfg) is None
