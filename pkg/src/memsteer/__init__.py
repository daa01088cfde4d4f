"""Test-time steering of frozen generative action policies.

Successful episode prefixes are banked in an online memory; at each decision
the current observation retrieves consistent elite chunks, and their
aggregate initializes the flow or diffusion sampler partway through its
schedule, pulling samples toward proven behavior exactly as hard as the
retrieval statistics justify.
"""

from .action_space import (
    ActionChunk,
    ActionStep,
    AggregationWeights,
    GRIPPER_CONTINUOUS,
    GRIPPER_DISCRETE,
    aggregate_chunks,
    canonicalize_axis_angle,
    geodesic_mean,
    rotation_angle,
    so3_exp,
    so3_log,
)
from .errors import (
    ConvergenceError,
    DegenerateKeyError,
    EvaluationError,
    InvalidInputError,
    SamplingDivergenceError,
    SnapshotCompatibilityError,
    SnapshotFormatError,
)
from .guidance import (
    DiffusionSchedule,
    GuidanceConfig,
    diffusion_sample_batch,
    flow_sample_batch,
    guidance_start_time,
    guided_diffusion_sample,
    guided_flow_sample,
    normalized_similarity,
    retrieval_confidence,
    start_time_from_prior,
)
from .harness import (
    DeploymentConfig,
    DeploymentSession,
    EpisodeRecord,
    bench_timing,
    config_from_dict,
    config_to_dict,
    cumulative_curve,
    final_success_by_seed,
    inspect_memory,
    load_config,
    run_ablation,
    run_deployment,
)
from .memory import (
    EpisodeBuffer,
    MemoryConfig,
    MemoryEntry,
    MemorySnapshot,
    ProgressTrace,
    RetrievalKey,
    SuccessMemory,
    accumulate_progress,
    commit_all_entries,
    commit_episode,
    evaluate_trajectory,
    evaluation_timesteps,
    load_snapshot,
    save_snapshot,
)
from .mixture_policy import (
    CompetenceParams,
    DiffusionPolicy,
    FlowPolicy,
    MixtureSpec,
    competence_profile,
    mixture_eps_predictor,
    mixture_velocity,
)
from .progress import (
    NoisyEstimatorConfig,
    OracleProgressEstimator,
    apply_verdict_noise,
    calibrate_flip_rates,
    noisy_episode_verdict,
)
from .retrieval import (
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
from .simenv import (
    ACTION_SCALE,
    DEFAULT_HORIZON,
    EnvStatus,
    ManipEnv,
    ObjectSpec,
    Observation,
    StageSpec,
    TaskSpec,
    expert_chunk,
    get_task,
    overshoot_chunk,
    task_suite,
    wrong_target_chunk,
)

__version__ = "0.1.0"
