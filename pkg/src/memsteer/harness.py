"""Deployment runner: closed-loop episodes, ablation sweeps, timing.

One deployment = one task, one seed, one fresh memory, n_episodes in
sequence. Episode e always resets its environment from (seed, e), so runs
in different guidance modes consume identical spawn streams and their
success curves are paired comparable. All per-episode randomness derives
from the same pair, making whole deployments bitwise reproducible.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import time
from collections import Counter
from typing import Optional

import numpy as np

from ._kernels import warmup
from .action_space import GRIPPER_CONTINUOUS, GRIPPER_MODES, aggregate_chunks
from .errors import InvalidInputError, SnapshotFormatError
from .guidance import (
    DiffusionSchedule,
    GuidanceConfig,
    guided_diffusion_sample,
    guided_flow_sample,
    start_time_from_prior,
)
from .memory import (
    EpisodeBuffer,
    MemoryConfig,
    SuccessMemory,
    commit_all_entries,
    commit_episode,
    evaluate_trajectory,
    parse_snapshot_entry,
    parse_snapshot_header,
)
from .mixture_policy import (
    CompetenceParams,
    DiffusionPolicy,
    FlowPolicy,
    competence_profile,
)
from .progress import NoisyEstimatorConfig, OracleProgressEstimator, apply_verdict_noise
from .retrieval import KeyProjector, RetrievalConfig, build_prior, extract_key
from .simenv import DEFAULT_HORIZON, ManipEnv, get_task

GUIDANCE_MODES = ("off", "dynamic_t0", "fixed_t0", "direct_replay", "output_interp")
MEMORY_CONSTRUCTIONS = ("prefix", "full", "all")
POLICIES = ("flow", "diffusion")
ESTIMATORS = ("oracle", "noisy")


@dataclasses.dataclass(frozen=True)
class DeploymentConfig:
    """Everything one deployment run depends on."""

    task_id: str = "T2"
    n_episodes: int = 300
    seeds: tuple = (0, 1, 2, 3, 4)
    policy: str = "flow"  # which sampler head of the frozen policy
    guidance_mode: str = "dynamic_t0"
    fixed_t0: Optional[float] = None  # required iff guidance_mode == fixed_t0
    interp_lambda: float = 0.5  # prior weight of output_interp
    estimator: str = "oracle"
    noisy: Optional[NoisyEstimatorConfig] = None  # required iff estimator == noisy
    memory_construction: str = "prefix"  # prefix | full (no truncation) | all (unverified)
    memory: MemoryConfig = MemoryConfig()
    retrieval: RetrievalConfig = RetrievalConfig()
    guidance: GuidanceConfig = GuidanceConfig()
    competence: CompetenceParams = CompetenceParams()
    horizon: int = DEFAULT_HORIZON
    key_dim: int = 64
    key_noise: float = 1e-3
    key_seed: int = 0
    gripper_mode: str = GRIPPER_CONTINUOUS
    abort_budget: int = 10  # tolerated per-run episode aborts before exit code 3

    def __post_init__(self):
        if self.guidance_mode not in GUIDANCE_MODES:
            raise InvalidInputError(f"unknown guidance mode {self.guidance_mode!r}")
        if self.policy not in POLICIES:
            raise InvalidInputError(f"unknown policy {self.policy!r}")
        if self.estimator not in ESTIMATORS:
            raise InvalidInputError(f"unknown estimator {self.estimator!r}")
        if self.memory_construction not in MEMORY_CONSTRUCTIONS:
            raise InvalidInputError(
                f"unknown memory construction {self.memory_construction!r}")
        if self.gripper_mode not in GRIPPER_MODES:
            raise InvalidInputError(f"unknown gripper mode {self.gripper_mode!r}")
        if self.guidance_mode == "fixed_t0":
            if self.fixed_t0 is None or not (0.0 < self.fixed_t0 <= 1.0):
                raise InvalidInputError("fixed_t0 mode needs fixed_t0 in (0, 1]")
        if self.estimator == "noisy" and self.noisy is None:
            raise InvalidInputError("noisy estimator needs a noisy config block")
        if not (0.0 <= self.interp_lambda <= 1.0):
            raise InvalidInputError("interp_lambda must lie in [0, 1]")
        if self.n_episodes < 1 or len(self.seeds) < 1:
            raise InvalidInputError("need at least one episode and one seed")
        if self.horizon < 1 or self.key_dim < 1:
            raise InvalidInputError("horizon and key_dim must be positive")
        if self.abort_budget < 0:
            raise InvalidInputError("abort_budget must be nonnegative")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclasses.dataclass(frozen=True)
class EpisodeRecord:
    episode_id: int
    seed: int
    true_success: bool
    verdict: bool  # the estimator's call, equals true_success under the oracle
    completion: float
    peak_timestep: int
    memory_size_after: int
    chunks_executed: int
    wall_time_ms: float
    mean_t0_used: Optional[float] = None  # over decisions that had a prior
    aborted: bool = False


# -- config (de)serialization ------------------------------------------------

_NESTED = {
    "memory": MemoryConfig,
    "retrieval": RetrievalConfig,
    "guidance": GuidanceConfig,
    "competence": CompetenceParams,
    "noisy": NoisyEstimatorConfig,
}


def _build_dataclass(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidInputError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> DeploymentConfig:
    if not isinstance(data, dict):
        raise InvalidInputError("config root must be a JSON object")
    kwargs = dict(data)
    for name, cls in _NESTED.items():
        if kwargs.get(name) is not None:
            block = kwargs[name]
            if not isinstance(block, dict):
                raise InvalidInputError(f"config field {name!r} must be an object")
            kwargs[name] = _build_dataclass(cls, block)
    if "seeds" in kwargs:
        kwargs["seeds"] = tuple(kwargs["seeds"])
    try:
        return _build_dataclass(DeploymentConfig, kwargs)
    except TypeError as exc:  # wrong types that never reach validation
        raise InvalidInputError(str(exc)) from exc


def config_to_dict(config: DeploymentConfig) -> dict:
    out = dataclasses.asdict(config)
    out["seeds"] = list(out["seeds"])
    return out


def load_config(path) -> DeploymentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# -- deployment --------------------------------------------------------------


def _env_seed(seed: int, episode_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, episode_id])


def _sampler_rng(seed: int, episode_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, episode_id, 1]))


class DeploymentSession:
    """One task, one seed, one memory, episodes in sequence."""

    def __init__(self, config: DeploymentConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.task = get_task(config.task_id)
        self.env = ManipEnv(self.task, config.horizon)
        feature_dim = self.env.reset(0).feature_vector.size
        self.projector = KeyProjector(
            feature_dim, config.key_dim, config.key_noise, seed=config.key_seed)
        self.memory = SuccessMemory(
            config.key_dim, config.horizon, config.gripper_mode, config.memory.capacity)
        self.flow_policy = FlowPolicy()
        self.schedule = DiffusionSchedule.linear()
        self.diffusion_policy = DiffusionPolicy(self.schedule)
        self.dtw_cache: dict = {}
        self.records: list = []
        self.aborts = 0

    def _sample(self, spec, prior, rng, t0=None):
        if self.config.policy == "flow":
            return guided_flow_sample(
                self.flow_policy, spec, prior, self.config.guidance, rng,
                horizon=self.config.horizon, t0=t0)
        return guided_diffusion_sample(
            self.diffusion_policy, spec, prior, self.schedule, self.config.guidance,
            rng, horizon=self.config.horizon, t0=t0)

    def _decide(self, spec, prior, rng, t0_used: list):
        mode = self.config.guidance_mode
        if prior is None:
            return self._sample(spec, None, rng)
        if mode == "dynamic_t0":
            t0 = start_time_from_prior(prior, self.config.guidance)
            t0_used.append(t0)
            return self._sample(spec, prior, rng, t0=t0)
        if mode == "fixed_t0":
            t0_used.append(self.config.fixed_t0)
            return self._sample(spec, prior, rng, t0=self.config.fixed_t0)
        if mode == "direct_replay":
            return prior.chunk
        # output_interp: fresh sample blended with the prior
        lam = self.config.interp_lambda
        sample = self._sample(spec, None, rng)
        return aggregate_chunks(
            [sample, prior.chunk], (1.0 - lam, lam), self.config.gripper_mode)

    def run_episode(self, episode_id: int) -> EpisodeRecord:
        cfg = self.config
        started = time.perf_counter()
        try:
            obs = self.env.reset(_env_seed(self.seed, episode_id))
            rng = _sampler_rng(self.seed, episode_id)
            buffer = EpisodeBuffer(self.task)
            snapshot = self.memory.snapshot()
            use_retrieval = cfg.guidance_mode != "off" and len(snapshot) > 0
            t0_used: list = []
            status = None
            while status is None or not status.done:
                key = extract_key(obs, self.projector)
                spec = competence_profile(self.task, obs, cfg.competence, cfg.horizon)
                prior = None
                if use_retrieval:
                    prior = build_prior(
                        snapshot, key, cfg.retrieval, cfg.gripper_mode,
                        task_id=self.task.task_id, dtw_cache=self.dtw_cache)
                chunk = self._decide(spec, prior, rng, t0_used)
                buffer.add_decision(obs, key, chunk, episode_id)
                obs, status = self.env.step_chunk(chunk)
            buffer.finish(obs)
            trace = evaluate_trajectory(buffer, OracleProgressEstimator(), cfg.memory)
            if cfg.estimator == "noisy":
                trace = apply_verdict_noise(trace, cfg.noisy, episode_id, cfg.memory.eta)
            if cfg.memory_construction == "prefix":
                commit_episode(self.memory, buffer, trace)
            elif cfg.memory_construction == "full":
                if trace.success:
                    commit_all_entries(self.memory, buffer)
            else:  # all: every episode, no verification
                commit_all_entries(self.memory, buffer)
            wall_ms = (time.perf_counter() - started) * 1e3
            return EpisodeRecord(
                episode_id=episode_id,
                seed=self.seed,
                true_success=status.true_success,
                verdict=trace.success,
                completion=trace.completion,
                peak_timestep=trace.peak_timestep,
                memory_size_after=len(self.memory),
                chunks_executed=status.step_count,
                wall_time_ms=wall_ms,
                mean_t0_used=float(np.mean(t0_used)) if t0_used else None,
            )
        except Exception:  # noqa: BLE001 - deployment must survive bad episodes
            self.aborts += 1
            wall_ms = (time.perf_counter() - started) * 1e3
            return EpisodeRecord(
                episode_id=episode_id,
                seed=self.seed,
                true_success=False,
                verdict=False,
                completion=0.0,
                peak_timestep=0,
                memory_size_after=len(self.memory),
                chunks_executed=0,
                wall_time_ms=wall_ms,
                mean_t0_used=None,
                aborted=True,
            )

    def run(self) -> list:
        for episode_id in range(self.config.n_episodes):
            self.records.append(self.run_episode(episode_id))
        return self.records


def run_deployment(config: DeploymentConfig) -> list:
    """All seeds in sequence; each seed gets a fresh session and memory."""
    records = []
    for seed in config.seeds:
        records.extend(DeploymentSession(config, seed).run())
    return records


def final_success_by_seed(records) -> dict:
    """Final cumulative true-success rate per seed."""
    by_seed: dict = {}
    for rec in records:
        by_seed.setdefault(rec.seed, []).append(1.0 if rec.true_success else 0.0)
    return {seed: float(np.mean(vals)) for seed, vals in by_seed.items()}


def cumulative_curve(records, seed: int) -> np.ndarray:
    flags = np.array([1.0 if r.true_success else 0.0 for r in records if r.seed == seed])
    return np.cumsum(flags) / np.arange(1, flags.size + 1)


# -- ablation ----------------------------------------------------------------

_ABLATION_AXES = ("guidance_mode", "capacity", "fixed_t0", "memory_construction",
                  "estimator")


def _apply_axis(config: DeploymentConfig, axis: str, value) -> DeploymentConfig:
    if axis == "capacity":
        cap = None if value is None else int(value)
        return dataclasses.replace(
            config, memory=dataclasses.replace(config.memory, capacity=cap))
    if axis == "fixed_t0":
        return dataclasses.replace(config, guidance_mode="fixed_t0",
                                   fixed_t0=float(value))
    if axis == "guidance_mode":
        return dataclasses.replace(config, guidance_mode=str(value))
    if axis == "memory_construction":
        return dataclasses.replace(config, memory_construction=str(value))
    if axis == "estimator":
        return dataclasses.replace(config, estimator=str(value))
    raise InvalidInputError(f"unknown ablation axis {axis!r}")


def run_ablation(base_config: DeploymentConfig, axes: dict) -> list:
    """Cartesian sweep; one row per cell with per-seed finals and mean/std."""
    for axis in axes:
        if axis not in _ABLATION_AXES:
            raise InvalidInputError(f"unknown ablation axis {axis!r}")
    names = list(axes.keys())
    rows = []
    for values in itertools.product(*(axes[n] for n in names)):
        cfg = base_config
        for name, value in zip(names, values):
            cfg = _apply_axis(cfg, name, value)
        records = run_deployment(cfg)
        finals = final_success_by_seed(records)
        per_seed = [finals[s] for s in cfg.seeds]
        rows.append({
            "cell": dict(zip(names, values)),
            "per_seed": per_seed,
            "mean": float(np.mean(per_seed)),
            "std": float(np.std(per_seed)),
            "aborted_episodes": sum(1 for r in records if r.aborted),
        })
    return rows


# -- timing ------------------------------------------------------------------


def _pad_memory(memory: SuccessMemory, target: int) -> None:
    """Clone stored entries (fresh uids) until the memory holds target entries."""
    if len(memory) == 0:
        raise InvalidInputError("cannot pad an empty memory")
    base = list(memory.entries)
    i = 0
    while len(memory) < target:
        memory.add(base[i % len(base)])
        i += 1


def bench_timing(config: DeploymentConfig, *, n_decisions: int = 1000,
                 target_entries: int = 3500, warm_episodes: int = 150) -> dict:
    """Median per-decision wall time of base, guided-only, and full pipeline.

    The memory is warmed by a short deployment on the config's task, padded
    to exactly target_entries, then frozen while decision states stream from
    further closed-loop episodes. Guided-only reuses the prior the full
    pipeline just built, so the two differ exactly by retrieval cost.
    """
    warmup()
    cfg = dataclasses.replace(
        config, guidance_mode="dynamic_t0",
        memory=dataclasses.replace(config.memory, capacity=max(target_entries, 1)),
        n_episodes=warm_episodes,
    )
    session = DeploymentSession(cfg, cfg.seeds[0])
    if target_entries > 0:
        session.run()
        _pad_memory(session.memory, target_entries)
    snapshot = session.memory.snapshot()
    task = session.task
    base_t: list = []
    guided_t: list = []
    full_t: list = []
    episode_id = 1_000_000  # past the warmed range; fresh spawn stream
    rng = np.random.default_rng(12345)
    while len(full_t) < n_decisions:
        obs = session.env.reset(_env_seed(cfg.seeds[0], episode_id))
        status = None
        while (status is None or not status.done) and len(full_t) < n_decisions:
            spec = competence_profile(task, obs, cfg.competence, cfg.horizon)
            key = extract_key(obs, session.projector)

            t0 = time.perf_counter_ns()
            prior = None
            if len(snapshot) > 0:
                prior = build_prior(
                    snapshot, key, cfg.retrieval, cfg.gripper_mode,
                    task_id=task.task_id, dtw_cache=session.dtw_cache)
            start = None if prior is None else start_time_from_prior(prior, cfg.guidance)
            chunk = session._sample(spec, prior, rng, t0=start)
            full_t.append(time.perf_counter_ns() - t0)

            t0 = time.perf_counter_ns()
            session._sample(spec, prior, rng, t0=start)
            guided_t.append(time.perf_counter_ns() - t0)

            t0 = time.perf_counter_ns()
            session._sample(spec, None, rng)
            base_t.append(time.perf_counter_ns() - t0)

            obs, status = session.env.step_chunk(chunk)
        episode_id += 1
    base_ms = float(np.median(base_t)) / 1e6
    guided_ms = float(np.median(guided_t)) / 1e6
    full_ms = float(np.median(full_t)) / 1e6
    return {
        "n_decisions": len(full_t),
        "memory_entries": len(snapshot),
        "base_ms": base_ms,
        "guided_ms": guided_ms,
        "full_ms": full_ms,
        "guided_ratio": guided_ms / base_ms,
        "full_ratio": full_ms / base_ms,
    }


# -- snapshot inspection -----------------------------------------------------


def inspect_memory(snapshot_path) -> dict:
    """Summarize a snapshot file and validate every line, collecting violations."""
    report = {
        "path": str(snapshot_path),
        "entries": 0,
        "per_task": {},
        "episode_range": None,
        "key_dim": None,
        "horizon": None,
        "gripper_mode": None,
        "violations": [],
    }
    try:
        with open(snapshot_path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InvalidInputError(f"cannot read snapshot {snapshot_path}: {exc}") from exc
    if not lines:
        report["violations"].append("line 1: missing snapshot header")
        return report
    try:
        header = parse_snapshot_header(lines[0])
    except SnapshotFormatError as exc:
        report["violations"].append(str(exc))
        return report
    report["key_dim"] = header["dim"]
    report["horizon"] = header["horizon"]
    report["gripper_mode"] = header["gripper_mode"]
    tasks: Counter = Counter()
    episodes = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            entry = parse_snapshot_entry(line, lineno, header["dim"], header["horizon"])
        except Exception as exc:  # noqa: BLE001 - collect, do not stop
            report["violations"].append(str(exc))
            continue
        report["entries"] += 1
        tasks[entry.task_id] += 1
        episodes.append(entry.episode_id)
    report["per_task"] = dict(sorted(tasks.items()))
    if episodes:
        report["episode_range"] = [min(episodes), max(episodes)]
    return report


def format_memory_report(report: dict) -> str:
    lines = [
        f"snapshot: {report['path']}",
        f"entries: {report['entries']}",
        f"key_dim: {report['key_dim']}  horizon: {report['horizon']}  "
        f"gripper_mode: {report['gripper_mode']}",
    ]
    if report["per_task"]:
        per = "  ".join(f"{t}={n}" for t, n in report["per_task"].items())
        lines.append(f"per-task: {per}")
    if report["episode_range"]:
        lines.append(f"episodes: {report['episode_range'][0]}..{report['episode_range'][1]}")
    if report["violations"]:
        lines.append(f"violations ({len(report['violations'])}):")
        lines.extend(f"  {v}" for v in report["violations"])
    else:
        lines.append("violations: none")
    return "\n".join(lines)


# -- result files ------------------------------------------------------------


def write_episode_records(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(dataclasses.asdict(rec)) + "\n")


def write_summary_csv(path, records) -> None:
    finals = final_success_by_seed(records)
    values = [finals[s] for s in sorted(finals)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "final_cumulative_success"])
        for seed in sorted(finals):
            writer.writerow([seed, f"{finals[seed]:.6f}"])
        writer.writerow(["mean", f"{np.mean(values):.6f}"])
        writer.writerow(["std", f"{np.std(values):.6f}"])


def write_curve_csv(path, records) -> None:
    seeds = sorted({r.seed for r in records})
    curves = {s: cumulative_curve(records, s) for s in seeds}
    n = min(c.size for c in curves.values())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode"] + [f"seed_{s}" for s in seeds] + ["mean"])
        for i in range(n):
            row = [curves[s][i] for s in seeds]
            writer.writerow([i + 1] + [f"{v:.6f}" for v in row]
                            + [f"{np.mean(row):.6f}"])


def write_ablation_csv(path, rows) -> None:
    axis_names = sorted({k for row in rows for k in row["cell"]})
    n_seeds = max(len(row["per_seed"]) for row in rows)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(axis_names + [f"seed_{i}" for i in range(n_seeds)]
                        + ["mean", "std"])
        for row in rows:
            cell = [row["cell"].get(a, "") for a in axis_names]
            per = [f"{v:.6f}" for v in row["per_seed"]]
            per += [""] * (n_seeds - len(per))
            writer.writerow(cell + per + [f"{row['mean']:.6f}", f"{row['std']:.6f}"])
