"""Online success memory with progress-gated commits.

Episodes are buffered as (retrieval key, executed chunk) pairs plus the
observations needed for progress evaluation. After the episode a progress
estimator scores coarse intervals, the scores accumulate through a saturating
recurrence, and only the prefix of a successful episode up to its progress
peak is committed. Storage is FIFO-bounded.
"""

from __future__ import annotations

import dataclasses
import functools
import json
from collections import deque
from typing import Any, Optional, Sequence

import numpy as np

from .action_space import ActionChunk, GRIPPER_MODES
from .errors import (
    EvaluationError,
    InvalidInputError,
    SnapshotCompatibilityError,
    SnapshotFormatError,
)

SNAPSHOT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class MemoryConfig:
    """Evaluation and storage parameters for the success memory."""

    delta: int = 5  # evaluation interval in decision steps
    eta: float = 0.95  # completion threshold for a success verdict
    capacity: Optional[int] = 3500  # FIFO bound; None means unlimited

    def __post_init__(self):
        if int(self.delta) != self.delta or self.delta < 1:
            raise InvalidInputError(f"delta must be a positive integer, got {self.delta}")
        if not (0.0 < self.eta <= 1.0):
            raise InvalidInputError(f"eta must lie in (0, 1], got {self.eta}")
        if self.capacity is not None and (int(self.capacity) != self.capacity or self.capacity < 0):
            raise InvalidInputError(f"capacity must be a nonnegative integer or None, got {self.capacity}")


@dataclasses.dataclass(frozen=True)
class RetrievalKey:
    """Unit-norm embedding of an observation."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise InvalidInputError("key must be a nonempty 1-d vector")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("key must be finite")
        nrm = float(np.linalg.norm(v))
        if abs(nrm - 1.0) > 1e-9:
            raise InvalidInputError(f"key must be unit norm, got {nrm!r}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.size


@dataclasses.dataclass(frozen=True)
class MemoryEntry:
    """One stored decision: where we were, what we did, where it came from."""

    key: RetrievalKey
    chunk: ActionChunk
    episode_id: int
    timestep: int
    task_id: str

    def __post_init__(self):
        if self.timestep < 0 or self.episode_id < 0:
            raise InvalidInputError("episode_id and timestep must be nonnegative")

    @functools.cached_property
    def step_rotations(self) -> np.ndarray:
        # cached so repeated DTW cost builds never re-exponentiate
        return self.chunk.step_rotations()


@dataclasses.dataclass(frozen=True)
class ProgressTrace:
    """Progress evaluation of one episode."""

    eval_timesteps: tuple
    interval_scores: tuple
    accumulated: tuple
    completion: float
    peak_timestep: int
    success: bool


class EpisodeBuffer:
    """Time-ordered episode storage consumed by progress evaluation.

    Observations are recorded at every decision step plus the terminal one,
    so any evaluation interval can be formed afterwards.
    """

    def __init__(self, task):
        self.task = task
        self.entries: list[MemoryEntry] = []
        self.observations: list[Any] = []
        self._finished = False

    def add_decision(self, observation, key: RetrievalKey, chunk: ActionChunk, episode_id: int) -> None:
        if self._finished:
            raise InvalidInputError("buffer already finished")
        t = len(self.entries)
        self.observations.append(observation)
        self.entries.append(
            MemoryEntry(key=key, chunk=chunk, episode_id=episode_id, timestep=t, task_id=self.task.task_id)
        )

    def finish(self, final_observation) -> None:
        if self._finished:
            raise InvalidInputError("buffer already finished")
        self.observations.append(final_observation)
        self._finished = True

    def __len__(self) -> int:
        return len(self.entries)


def accumulate_progress(v_prev: float, c: float) -> float:
    """Saturating progress update: v + (1 - v) * c, clamped to [0, 1]."""
    if not (np.isfinite(v_prev) and np.isfinite(c)):
        raise InvalidInputError("progress inputs must be finite")
    if not (0.0 <= v_prev <= 1.0):
        raise InvalidInputError(f"accumulated progress must lie in [0, 1], got {v_prev}")
    if not (-1.0 <= c <= 1.0):
        raise InvalidInputError(f"interval score must lie in [-1, 1], got {c}")
    return float(min(1.0, max(0.0, v_prev + (1.0 - v_prev) * c)))


def evaluation_timesteps(n_decisions: int, delta: int) -> list[int]:
    """Every delta-th decision step plus the terminal step."""
    taus = list(range(0, n_decisions + 1, delta))
    if taus[-1] != n_decisions:
        taus.append(n_decisions)
    return taus


def evaluate_trajectory(buffer: EpisodeBuffer, estimator, config: MemoryConfig) -> ProgressTrace:
    """Score an episode's coarse intervals and accumulate them into a trace.

    Completion is the maximum accumulated value; the peak timestep is the
    earliest evaluation step attaining it; success means completion >= eta.
    """
    if not buffer._finished:
        raise InvalidInputError("buffer must be finished before evaluation")
    T = len(buffer.entries)
    if T < 1:
        raise InvalidInputError("cannot evaluate an empty episode")
    if len(buffer.observations) != T + 1:
        raise InvalidInputError("buffer is missing observations")

    taus = evaluation_timesteps(T, config.delta)
    scores = []
    accumulated = [0.0]
    for m in range(1, len(taus)):
        o_prev = buffer.observations[taus[m - 1]]
        o_now = buffer.observations[taus[m]]
        try:
            c = float(estimator.estimate(o_prev, o_now, buffer.task))
        except Exception as exc:
            raise EvaluationError(
                f"progress estimation failed on interval ({taus[m - 1]}, {taus[m]}): {exc}"
            ) from exc
        if not (-1.0 <= c <= 1.0) or not np.isfinite(c):
            raise EvaluationError(f"estimator returned out-of-range score {c!r}")
        scores.append(c)
        accumulated.append(accumulate_progress(accumulated[-1], c))

    acc = np.asarray(accumulated)
    peak_idx = int(np.argmax(acc))  # argmax returns the earliest maximum
    completion = float(acc[peak_idx])
    return ProgressTrace(
        eval_timesteps=tuple(taus),
        interval_scores=tuple(scores),
        accumulated=tuple(accumulated),
        completion=completion,
        peak_timestep=taus[peak_idx],
        success=completion >= config.eta,
    )


class SuccessMemory:
    """FIFO-bounded store of elite decision entries."""

    def __init__(self, key_dim: int, horizon: int, gripper_mode: str = "continuous",
                 capacity: Optional[int] = 3500):
        if key_dim < 1 or horizon < 1:
            raise InvalidInputError("key_dim and horizon must be positive")
        if gripper_mode not in GRIPPER_MODES:
            raise InvalidInputError(f"unknown gripper mode {gripper_mode!r}")
        if capacity is not None and (int(capacity) != capacity or capacity < 0):
            raise InvalidInputError(f"capacity must be a nonnegative integer or None, got {capacity}")
        self.key_dim = int(key_dim)
        self.horizon = int(horizon)
        self.gripper_mode = gripper_mode
        self.capacity = capacity
        maxlen = None if capacity is None else int(capacity)
        self._entries: deque[MemoryEntry] = deque(maxlen=maxlen)
        self._uids: deque[int] = deque(maxlen=maxlen)
        self._next_uid = 0
        self._snapshot: Optional[MemorySnapshot] = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def add(self, entry: MemoryEntry) -> None:
        if entry.key.dim != self.key_dim:
            raise InvalidInputError(f"entry key dim {entry.key.dim} != memory dim {self.key_dim}")
        if entry.chunk.horizon != self.horizon:
            raise InvalidInputError(f"entry horizon {entry.chunk.horizon} != memory horizon {self.horizon}")
        if self.capacity == 0:
            return
        self._entries.append(entry)
        self._uids.append(self._next_uid)
        self._next_uid += 1
        self._snapshot = None

    def snapshot(self) -> "MemorySnapshot":
        """Immutable view with a dense key matrix; cached until mutation."""
        if self._snapshot is None:
            entries = tuple(self._entries)
            if entries:
                keys = np.stack([e.key.values for e in entries])
            else:
                keys = np.zeros((0, self.key_dim))
            self._snapshot = MemorySnapshot(
                entries=entries,
                uids=tuple(self._uids),
                key_matrix=keys,
                key_dim=self.key_dim,
                horizon=self.horizon,
                gripper_mode=self.gripper_mode,
            )
        return self._snapshot


@dataclasses.dataclass(frozen=True)
class MemorySnapshot:
    """Read-only view of a SuccessMemory at one instant."""

    entries: tuple
    uids: tuple
    key_matrix: np.ndarray
    key_dim: int
    horizon: int
    gripper_mode: str

    def __len__(self) -> int:
        return len(self.entries)


def commit_episode(memory: SuccessMemory, buffer: EpisodeBuffer, trace: ProgressTrace) -> int:
    """Append the progress-peak prefix of a successful episode.

    Failed episodes contribute nothing. Returns the number of entries added;
    FIFO eviction applies when capacity is exceeded.
    """
    if not trace.success:
        return 0
    added = 0
    for entry in buffer.entries:
        if entry.timestep <= trace.peak_timestep:
            memory.add(entry)
            added += 1
    return added


def commit_all_entries(memory: SuccessMemory, buffer: EpisodeBuffer) -> int:
    """Append every buffered entry without verification or truncation."""
    for entry in buffer.entries:
        memory.add(entry)
    return len(buffer.entries)


def save_snapshot(memory: SuccessMemory, path) -> None:
    """Write a line-oriented JSON snapshot: one header line, one entry line each."""
    header = {
        "version": SNAPSHOT_VERSION,
        "dim": memory.key_dim,
        "horizon": memory.horizon,
        "gripper_mode": memory.gripper_mode,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for entry in memory.entries:
            rec = {
                "episode": entry.episode_id,
                "t": entry.timestep,
                "task": entry.task_id,
                "key": entry.key.values.tolist(),
                "dp": entry.chunk.dp.tolist(),
                "dr": entry.chunk.dr.tolist(),
                "g": entry.chunk.g.tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def parse_snapshot_header(line: str) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"invalid header JSON: {exc}", line=1) from None
    if not isinstance(header, dict) or header.get("version") != SNAPSHOT_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot header {header!r}", line=1)
    for field in ("dim", "horizon", "gripper_mode"):
        if field not in header:
            raise SnapshotFormatError(f"header missing {field!r}", line=1)
    if header["gripper_mode"] not in GRIPPER_MODES:
        raise SnapshotFormatError(f"unknown gripper mode {header['gripper_mode']!r}", line=1)
    return header


def parse_snapshot_entry(line: str, lineno: int, dim: int, horizon: int) -> MemoryEntry:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SnapshotFormatError(f"invalid entry JSON: {exc}", line=lineno) from None
    try:
        key = np.asarray(rec["key"], dtype=np.float64)
        dp = np.asarray(rec["dp"], dtype=np.float64)
        dr = np.asarray(rec["dr"], dtype=np.float64)
        g = np.asarray(rec["g"], dtype=np.float64)
        episode = int(rec["episode"])
        t = int(rec["t"])
        task = str(rec["task"])
    except (KeyError, TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"malformed entry: {exc}", line=lineno) from None
    if key.shape != (dim,):
        raise SnapshotFormatError(f"key has shape {key.shape}, header dim is {dim}", line=lineno)
    if dp.shape != (horizon, 3) or dr.shape != (horizon, 3) or g.shape != (horizon,):
        raise SnapshotFormatError(
            f"chunk arrays disagree with header horizon {horizon}", line=lineno
        )
    try:
        return MemoryEntry(
            key=RetrievalKey(key),
            chunk=ActionChunk(dp=dp, dr=dr, g=g),
            episode_id=episode,
            timestep=t,
            task_id=task,
        )
    except InvalidInputError as exc:
        raise SnapshotFormatError(str(exc), line=lineno) from None


def load_snapshot(path, capacity: Optional[int] = None, *, expect_dim: Optional[int] = None,
                  expect_horizon: Optional[int] = None) -> SuccessMemory:
    """Load a snapshot written by save_snapshot.

    Parsing is all-or-nothing: a malformed or truncated file raises
    SnapshotFormatError naming the offending line and nothing is loaded.
    Capacity is not persisted in the file; pass it explicitly (None keeps
    everything) and note that a finite capacity retains the newest entries.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise SnapshotFormatError("empty snapshot file", line=1)
    header = parse_snapshot_header(lines[0])
    dim, horizon = int(header["dim"]), int(header["horizon"])
    if expect_dim is not None and expect_dim != dim:
        raise SnapshotCompatibilityError(f"snapshot dim {dim} != expected {expect_dim}")
    if expect_horizon is not None and expect_horizon != horizon:
        raise SnapshotCompatibilityError(f"snapshot horizon {horizon} != expected {expect_horizon}")

    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            raise SnapshotFormatError("blank entry line", line=lineno)
        entries.append(parse_snapshot_entry(line, lineno, dim, horizon))

    memory = SuccessMemory(dim, horizon, header["gripper_mode"], capacity=capacity)
    for entry in entries:
        memory.add(entry)
    return memory
