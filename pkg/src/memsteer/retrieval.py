"""Similarity-gated retrieval and elite action prior construction.

A query observation is projected to a unit key, the memory is scanned by
cosine similarity, and survivors of a hard gate go through pairwise-DTW
consistency filtering. The remaining candidates are softmax-weighted by
similarity and aggregated into a single elite chunk together with the two
statistics the guidance stage consumes: mean similarity and DTW dispersion.
"""

from __future__ import annotations

import dataclasses
from typing import Optional, Sequence

import numpy as np

from . import _kernels as _k
from .action_space import ActionChunk, AggregationWeights, aggregate_chunks
from .errors import DegenerateKeyError, InvalidInputError
from .memory import MemorySnapshot, RetrievalKey

STAGE_SIMILARITY_GATED = "similarity_gated"
STAGE_CONSISTENCY_FILTERED = "consistency_filtered"


@dataclasses.dataclass(frozen=True)
class RetrievalConfig:
    """Parameters of the retrieval and filtering stages."""

    k: int = 10  # neighbors scanned per query
    gamma_sim: float = 0.9992  # hard cosine gate
    tau: float = 0.05  # softmax temperature over similarities
    mad_lambda: float = 3.0  # robust outlier cut: median(r) + lambda * MAD(r)
    rotation_cost_weight: float = 1.0  # DTW per-step rotation angle weight
    gripper_cost_weight: float = 0.25  # DTW per-step gripper difference weight

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidInputError(f"k must be a positive integer, got {self.k}")
        if not (-1.0 < self.gamma_sim < 1.0):
            raise InvalidInputError(f"gamma_sim must lie in (-1, 1), got {self.gamma_sim}")
        if self.tau <= 0:
            raise InvalidInputError(f"tau must be positive, got {self.tau}")
        if self.mad_lambda <= 0:
            raise InvalidInputError(f"mad_lambda must be positive, got {self.mad_lambda}")
        if self.rotation_cost_weight < 0 or self.gripper_cost_weight < 0:
            raise InvalidInputError("cost weights must be nonnegative")


class KeyProjector:
    """Fixed seeded random projection from observation features to keys.

    The projection matrix is frozen at construction; per-call observation
    noise is drawn from the projector's own generator so extraction stays
    reproducible given the construction seed and call order.
    """

    def __init__(self, feature_dim: int, key_dim: int = 64, noise_scale: float = 1e-3,
                 seed: int = 0):
        if feature_dim < 1 or key_dim < 1:
            raise InvalidInputError("feature_dim and key_dim must be positive")
        if noise_scale < 0:
            raise InvalidInputError("noise_scale must be nonnegative")
        self.feature_dim = int(feature_dim)
        self.key_dim = int(key_dim)
        self.noise_scale = float(noise_scale)
        rng = np.random.default_rng(seed)
        self.matrix = rng.standard_normal((key_dim, feature_dim)) / np.sqrt(feature_dim)
        self._noise_rng = np.random.default_rng([seed, 7])


def extract_key(observation, projector: KeyProjector) -> RetrievalKey:
    """Project, perturb, and normalize an observation into a retrieval key."""
    f = np.asarray(observation.feature_vector, dtype=np.float64)
    if f.shape != (projector.feature_dim,):
        raise InvalidInputError(
            f"feature vector has shape {f.shape}, projector expects ({projector.feature_dim},)"
        )
    u = projector.matrix @ f
    nrm = float(np.linalg.norm(u))
    if nrm < 1e-12:
        raise DegenerateKeyError("projected feature vector has zero norm")
    u = u / nrm
    if projector.noise_scale > 0:
        u = u + projector.noise_scale * projector._noise_rng.standard_normal(projector.key_dim)
        nrm = float(np.linalg.norm(u))
        if nrm < 1e-12:
            raise DegenerateKeyError("key vanished after observation noise")
        u = u / nrm
    return RetrievalKey(u)


@dataclasses.dataclass(frozen=True)
class Candidate:
    """A retrieved memory entry with its per-stage statistics."""

    entry: object
    uid: int
    similarity: float
    inconsistency: Optional[float] = None
    weight: Optional[float] = None


@dataclasses.dataclass(frozen=True)
class CandidateSet:
    """Retrieval candidates ordered by descending similarity."""

    candidates: tuple
    stage: str

    def __post_init__(self):
        sims = [c.similarity for c in self.candidates]
        if any(sims[i] < sims[i + 1] for i in range(len(sims) - 1)):
            raise InvalidInputError("candidates must be ordered by descending similarity")

    def __len__(self) -> int:
        return len(self.candidates)


@dataclasses.dataclass(frozen=True)
class EliteActionPrior:
    """Aggregated elite chunk plus the statistics guidance consumes."""

    chunk: ActionChunk
    mean_similarity: float
    dtw_dispersion: float
    support: int

    def __post_init__(self):
        if self.support < 1:
            raise InvalidInputError("prior support must be >= 1")
        if self.dtw_dispersion < 0:
            raise InvalidInputError("dtw dispersion must be nonnegative")
        if self.support == 1 and self.dtw_dispersion != 0.0:
            raise InvalidInputError("a single-survivor prior has zero dispersion")


def _task_indices(snapshot: MemorySnapshot, task_id: str) -> np.ndarray:
    # built once per snapshot; snapshots are immutable between commits
    cache = snapshot.__dict__.setdefault("_task_index", {})
    idx = cache.get(task_id)
    if idx is None:
        idx = np.array(
            [i for i, e in enumerate(snapshot.entries) if e.task_id == task_id], dtype=np.int64
        )
        cache[task_id] = idx
    return idx


def _task_keys(snapshot: MemorySnapshot, task_id: str, idx: np.ndarray) -> np.ndarray:
    # contiguous per-task key submatrix, built once per snapshot: the scan
    # runs every decision and must not re-copy the key matrix each call
    cache = snapshot.__dict__.setdefault("_task_keys", {})
    mat = cache.get(task_id)
    if mat is None:
        mat = np.ascontiguousarray(snapshot.key_matrix[idx])
        cache[task_id] = mat
    return mat


def retrieve(snapshot: MemorySnapshot, key: RetrievalKey, config: RetrievalConfig,
             task_id: Optional[str] = None) -> CandidateSet:
    """Top-k cosine scan followed by the hard similarity gate.

    Ties in similarity resolve toward the most recently inserted entry.
    Entries from other tasks are excluded before the scan when task_id is
    given.
    """
    if key.dim != snapshot.key_dim:
        raise InvalidInputError(f"key dim {key.dim} != snapshot dim {snapshot.key_dim}")
    n = len(snapshot)
    if n == 0:
        return CandidateSet(candidates=(), stage=STAGE_SIMILARITY_GATED)

    if task_id is None:
        idx = np.arange(n, dtype=np.int64)
        sims = snapshot.key_matrix @ key.values
    else:
        idx = _task_indices(snapshot, task_id)
        if idx.size == 0:
            return CandidateSet(candidates=(), stage=STAGE_SIMILARITY_GATED)
        sims = _task_keys(snapshot, task_id, idx) @ key.values

    if sims.size > config.k:
        # exact top-k with recency tiebreak: everything strictly above the
        # k-th value is in; ties at the boundary resolve to newest entries
        part = np.argpartition(-sims, config.k - 1)[: config.k]
        kth = sims[part].min()
        definite = np.nonzero(sims > kth)[0]
        tied = np.nonzero(sims == kth)[0]
        need = config.k - definite.size
        sel = np.concatenate((definite, np.sort(tied)[::-1][:need]))
    else:
        sel = np.arange(sims.size)

    order = sel[np.lexsort((-idx[sel], -sims[sel]))]
    chosen = []
    for j in order:
        s = float(sims[j])
        if s < config.gamma_sim:
            continue
        i = int(idx[j])
        chosen.append(Candidate(entry=snapshot.entries[i], uid=snapshot.uids[i], similarity=s))
    return CandidateSet(candidates=tuple(chosen), stage=STAGE_SIMILARITY_GATED)


def _chunk_rotations(chunk_or_entry) -> np.ndarray:
    entry_rot = getattr(chunk_or_entry, "step_rotations", None)
    if isinstance(entry_rot, np.ndarray):
        return entry_rot
    return chunk_or_entry.step_rotations()


def dtw_distance(a: ActionChunk, b: ActionChunk, config: RetrievalConfig) -> float:
    """Unnormalized DTW path cost between two chunks.

    The per-step cost is the translation distance plus weighted rotation
    geodesic angle plus weighted absolute gripper difference; alignment uses
    match, insert, and delete moves.
    """
    Ra = _chunk_rotations(a)
    Rb = _chunk_rotations(b)
    diff = a.dp[:, None, :] - b.dp[None, :, :]
    cost = np.linalg.norm(diff, axis=2)
    traces = np.einsum("aij,bij->ab", Ra, Rb)
    angles = np.arccos(np.clip(0.5 * (traces - 1.0), -1.0, 1.0))
    cost = cost + config.rotation_cost_weight * angles
    cost = cost + config.gripper_cost_weight * np.abs(a.g[:, None] - b.g[None, :])
    return float(_k.dtw_dp_k(cost))


def _pairwise_dtw(candidates: Sequence[Candidate], config: RetrievalConfig,
                  cache: Optional[dict]) -> np.ndarray:
    """Symmetric pairwise DTW matrix over candidates, cached by entry uid."""
    K = len(candidates)
    D = np.zeros((K, K))
    miss_i, miss_j = [], []
    for i in range(K):
        for j in range(i + 1, K):
            if cache is not None:
                ka, kb = candidates[i].uid, candidates[j].uid
                pair = (ka, kb) if ka < kb else (kb, ka)
                hit = cache.get(pair)
                if hit is not None:
                    D[i, j] = D[j, i] = hit
                    continue
            miss_i.append(i)
            miss_j.append(j)

    if miss_i:
        dp = np.stack([c.entry.chunk.dp for c in candidates])
        g = np.stack([c.entry.chunk.g for c in candidates])
        R = np.stack([_chunk_rotations(c.entry) for c in candidates])
        traces = np.einsum("ahij,bkij->abhk", R, R)
        dists = _k.dtw_pairwise_k(
            np.ascontiguousarray(dp), np.ascontiguousarray(traces), np.ascontiguousarray(g),
            config.rotation_cost_weight, config.gripper_cost_weight,
            np.asarray(miss_i, dtype=np.int64), np.asarray(miss_j, dtype=np.int64),
        )
        for p, (i, j) in enumerate(zip(miss_i, miss_j)):
            d = float(dists[p])
            D[i, j] = D[j, i] = d
            if cache is not None:
                ka, kb = candidates[i].uid, candidates[j].uid
                cache[(ka, kb) if ka < kb else (kb, ka)] = d
    return D


def _median_sorted(row: np.ndarray) -> float:
    """Median of a 1-d array via full sort; cheap at candidate-set sizes."""
    s = np.sort(row)
    m = s.size // 2
    if s.size % 2:
        return float(s[m])
    return float(0.5 * (s[m - 1] + s[m]))


def consistency_filter(cset: CandidateSet, config: RetrievalConfig, *,
                       dtw_cache: Optional[dict] = None) -> CandidateSet:
    """Drop candidates whose trajectories disagree with the retrieved set.

    Each candidate's inconsistency is its median pairwise DTW distance to the
    others; candidates beyond median + lambda * MAD are removed. A zero MAD
    removes nothing, the minimum-inconsistency candidate always survives, and
    sets of size <= 2 pass through with statistics attached.
    """
    if cset.stage != STAGE_SIMILARITY_GATED:
        raise InvalidInputError(f"expected a similarity-gated set, got stage {cset.stage!r}")
    K = len(cset)
    if K == 0:
        return CandidateSet(candidates=(), stage=STAGE_CONSISTENCY_FILTERED)
    if K == 1:
        only = dataclasses.replace(cset.candidates[0], inconsistency=0.0)
        return CandidateSet(candidates=(only,), stage=STAGE_CONSISTENCY_FILTERED)

    D = _pairwise_dtw(cset.candidates, config, dtw_cache)
    off_diag = np.sort(D[~np.eye(K, dtype=bool)].reshape(K, K - 1), axis=1)
    m = (K - 1) // 2
    if (K - 1) % 2:
        r = off_diag[:, m]
    else:
        r = 0.5 * (off_diag[:, m - 1] + off_diag[:, m])

    if K == 2:
        kept = tuple(
            dataclasses.replace(c, inconsistency=float(r[i]))
            for i, c in enumerate(cset.candidates)
        )
        return CandidateSet(candidates=kept, stage=STAGE_CONSISTENCY_FILTERED)

    med = _median_sorted(r)
    mad = _median_sorted(np.abs(r - med))
    if mad == 0.0:
        keep = np.ones(K, dtype=bool)
    else:
        keep = r <= med + config.mad_lambda * mad
        keep[int(np.argmin(r))] = True  # the most consistent candidate always survives
    kept = tuple(
        dataclasses.replace(c, inconsistency=float(r[i]))
        for i, c in enumerate(cset.candidates)
        if keep[i]
    )
    return CandidateSet(candidates=kept, stage=STAGE_CONSISTENCY_FILTERED)


def softmax_weights(similarities, tau: float) -> AggregationWeights:
    """Max-shifted softmax over similarities at temperature tau."""
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise InvalidInputError("similarities must be a nonempty 1-d array")
    if tau <= 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    z = np.exp((s - s.max()) / tau)
    return AggregationWeights(z / z.sum())


def build_elite_prior(cset: CandidateSet, config: RetrievalConfig,
                      gripper_mode: str = "continuous") -> Optional[EliteActionPrior]:
    """Aggregate filtered candidates into an elite prior.

    Returns None on an empty set. Mean similarity is the arithmetic mean over
    survivors; dispersion is the population standard deviation of their
    inconsistency values (zero for a single survivor).
    """
    if cset.stage != STAGE_CONSISTENCY_FILTERED:
        raise InvalidInputError(f"expected a consistency-filtered set, got stage {cset.stage!r}")
    K = len(cset)
    if K == 0:
        return None
    sims = np.array([c.similarity for c in cset.candidates])
    weights = softmax_weights(sims, config.tau)
    if K == 1:
        chunk = cset.candidates[0].entry.chunk
        dispersion = 0.0
    else:
        chunks = [c.entry.chunk for c in cset.candidates]
        rotations = [_chunk_rotations(c.entry) for c in cset.candidates]
        chunk = aggregate_chunks(chunks, weights, gripper_mode, step_rotations=rotations)
        r = np.array([c.inconsistency for c in cset.candidates], dtype=np.float64)
        dispersion = float(np.std(r))
    return EliteActionPrior(
        chunk=chunk,
        mean_similarity=float(sims.mean()),
        dtw_dispersion=dispersion,
        support=K,
    )


def build_prior(snapshot: MemorySnapshot, key: RetrievalKey, config: RetrievalConfig,
                gripper_mode: str = "continuous", *, task_id: Optional[str] = None,
                dtw_cache: Optional[dict] = None) -> Optional[EliteActionPrior]:
    """Full retrieval pipeline: scan, gate, filter, aggregate."""
    gated = retrieve(snapshot, key, config, task_id=task_id)
    if len(gated) == 0:
        return None
    filtered = consistency_filter(gated, config, dtw_cache=dtw_cache)
    return build_elite_prior(filtered, config, gripper_mode)
