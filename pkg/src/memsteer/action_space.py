"""Action chunk representation and SE(3)-aware chunk algebra.

A chunk is a fixed-horizon sequence of end-effector deltas: translation dp,
rotation dr as a canonical axis-angle vector (angle in [0, pi]), and a scalar
gripper command g in [0, 1]. Aggregation of several chunks is component
aware: translations average linearly, rotations average on the manifold via
a weighted Karcher mean, gripper commands average (continuous mode) or vote
(discrete mode).
"""

from __future__ import annotations

import dataclasses
from typing import Iterator, Optional, Sequence

import numpy as np

from . import _kernels as _k
from .errors import ConvergenceError, InvalidInputError

GRIPPER_MIN = 0.0
GRIPPER_MAX = 1.0

GRIPPER_CONTINUOUS = "continuous"
GRIPPER_DISCRETE = "discrete"
GRIPPER_MODES = (GRIPPER_CONTINUOUS, GRIPPER_DISCRETE)

# Voting margin between the two heaviest gripper classes below which discrete
# aggregation falls back to copying the highest-weight candidate.
GRIPPER_VOTE_MARGIN = 0.1

_MEAN_STEP_TOL = 1e-10
_MEAN_RESIDUAL_TOL = 1e-8
_MEAN_MAX_ITER = 100
_ORTHO_TOL = 1e-6


@dataclasses.dataclass(frozen=True)
class ActionStep:
    """One timestep of a chunk: translation, rotation vector, gripper."""

    dp: np.ndarray
    dr: np.ndarray
    g: float


@dataclasses.dataclass(frozen=True, eq=False)
class ActionChunk:
    """Horizon-H action chunk stored as arrays.

    dp: (H, 3) translation deltas, dr: (H, 3) canonical axis-angle rotation
    deltas with norm <= pi, g: (H,) gripper commands in [0, 1].
    """

    dp: np.ndarray
    dr: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        dp = np.asarray(self.dp, dtype=np.float64)
        dr = np.asarray(self.dr, dtype=np.float64)
        g = np.asarray(self.g, dtype=np.float64)
        if dp.ndim != 2 or dp.shape[1] != 3 or dr.shape != dp.shape:
            raise InvalidInputError(
                f"chunk arrays must be (H, 3); got dp {dp.shape}, dr {dr.shape}"
            )
        if g.shape != (dp.shape[0],):
            raise InvalidInputError(f"gripper array must be (H,); got {g.shape}")
        if dp.shape[0] < 1:
            raise InvalidInputError("chunk horizon must be >= 1")
        if not (np.all(np.isfinite(dp)) and np.all(np.isfinite(dr)) and np.all(np.isfinite(g))):
            raise InvalidInputError("chunk contains non-finite values")
        norms = np.linalg.norm(dr, axis=1)
        if np.any(norms > np.pi + 1e-9):
            raise InvalidInputError("rotation vectors must be canonical (norm <= pi)")
        if np.any(g < GRIPPER_MIN - 1e-9) or np.any(g > GRIPPER_MAX + 1e-9):
            raise InvalidInputError("gripper commands must lie in [0, 1]")
        object.__setattr__(self, "dp", dp)
        object.__setattr__(self, "dr", dr)
        object.__setattr__(self, "g", g)

    @property
    def horizon(self) -> int:
        return self.dp.shape[0]

    def step(self, h: int) -> ActionStep:
        return ActionStep(self.dp[h], self.dr[h], float(self.g[h]))

    def steps(self) -> Iterator[ActionStep]:
        for h in range(self.horizon):
            yield self.step(h)

    def flatten(self) -> np.ndarray:
        """Row-major flattening: per step [dp(3), dr(3), g]."""
        return np.concatenate((self.dp, self.dr, self.g[:, None]), axis=1).ravel()

    @classmethod
    def from_flat(cls, x: np.ndarray, horizon: int) -> "ActionChunk":
        x = np.asarray(x, dtype=np.float64).reshape(horizon, 7)
        return cls(dp=x[:, 0:3].copy(), dr=x[:, 3:6].copy(), g=x[:, 6].copy())

    def step_rotations(self) -> np.ndarray:
        """Rotation matrices of each step's dr, shape (H, 3, 3)."""
        out = np.empty((self.horizon, 3, 3))
        for h in range(self.horizon):
            out[h] = _k.so3_exp_k(self.dr[h])
        return out


@dataclasses.dataclass(frozen=True)
class AggregationWeights:
    """Nonnegative weights summing to one (within 1e-12)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 1:
            raise InvalidInputError("weights must be a nonempty 1-d array")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise InvalidInputError("weights must be finite and nonnegative")
        if abs(float(v.sum()) - 1.0) > 1e-12:
            raise InvalidInputError(f"weights must sum to 1, got {v.sum()!r}")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Map an axis-angle vector to a rotation matrix (Rodrigues).

    Uses the second-order series for norms below 1e-8.
    """
    omega = np.asarray(omega, dtype=np.float64)
    if omega.shape != (3,):
        raise InvalidInputError(f"axis-angle vector must have shape (3,), got {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise InvalidInputError("axis-angle vector must be finite")
    return _k.so3_exp_k(omega)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Canonical axis-angle vector of a rotation matrix, angle in [0, pi].

    At angle pi the representative with nonnegative leading nonzero axis
    component is returned. Inputs violating orthonormality beyond 1e-6 are
    rejected.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidInputError(f"rotation matrix must have shape (3, 3), got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidInputError("rotation matrix must be finite")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > _ORTHO_TOL or np.linalg.det(R) < 0:
        raise InvalidInputError(f"matrix is not a rotation (orthonormality error {err:.3e})")
    return _k.so3_log_k(R)


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector to the canonical representative.

    Vectors with norm <= pi are returned unchanged. Larger angles are wrapped
    modulo 2*pi with the axis flipped as needed so the result lies in [0, pi].
    """
    v = np.asarray(v, dtype=np.float64)
    nrm = float(np.linalg.norm(v))
    if nrm <= np.pi:
        return v
    angle = np.fmod(nrm, 2.0 * np.pi)
    if angle > np.pi:
        angle -= 2.0 * np.pi
    return v * (angle / nrm)


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle between two rotations."""
    tr = float(np.einsum("ij,ij->", Ra, Rb))
    return float(np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0)))


def _as_weight_array(weights, n: int) -> np.ndarray:
    if isinstance(weights, AggregationWeights):
        w = weights.values
    else:
        w = AggregationWeights(np.asarray(weights, dtype=np.float64)).values
    if w.size != n:
        raise InvalidInputError(f"got {n} items but {w.size} weights")
    return w


def geodesic_mean(rotations, weights) -> np.ndarray:
    """Weighted Karcher mean of rotation matrices.

    Fixed-point iteration R <- R * exp(sum_i w_i * log(R^T R_i)), initialized
    at the highest-weight rotation, run until the update step norm drops
    below 1e-10 (at most 100 iterations). Raises ConvergenceError with the
    final residual if that fails.
    """
    Rs = np.asarray(rotations, dtype=np.float64)
    if Rs.ndim != 3 or Rs.shape[1:] != (3, 3) or Rs.shape[0] < 1:
        raise InvalidInputError(f"rotations must be (N, 3, 3), got {Rs.shape}")
    for i in range(Rs.shape[0]):
        err = np.abs(Rs[i].T @ Rs[i] - np.eye(3)).max()
        if err > _ORTHO_TOL or not np.all(np.isfinite(Rs[i])):
            raise InvalidInputError(f"input {i} is not a rotation matrix")
    w = _as_weight_array(weights, Rs.shape[0])
    init_idx = int(np.argmax(w))
    R, residual, converged = _k.geodesic_mean_k(
        np.ascontiguousarray(Rs), w, init_idx, _MEAN_STEP_TOL, _MEAN_MAX_ITER
    )
    if not converged and residual >= _MEAN_RESIDUAL_TOL:
        raise ConvergenceError(
            f"geodesic mean did not converge in {_MEAN_MAX_ITER} iterations "
            f"(residual {residual:.3e})",
            residual=float(residual),
        )
    return R


def _canonical_order(chunks: Sequence[ActionChunk], w: np.ndarray) -> list:
    """Permutation-independent processing order for weighted reductions.

    Sorting by weight and then by the raw chunk payload makes every reduction
    below independent of the caller's candidate ordering, so equal inputs in
    any order aggregate bitwise identically.
    """
    keys = [(w[i],) + tuple(chunks[i].flatten()[::-1]) for i in range(len(chunks))]
    return sorted(range(len(chunks)), key=keys.__getitem__)


def aggregate_chunks(candidates: Sequence[ActionChunk], weights, gripper_mode=GRIPPER_CONTINUOUS,
                     *, step_rotations: Optional[Sequence[np.ndarray]] = None) -> ActionChunk:
    """Combine candidate chunks into one under aggregation weights.

    Per step: dp is the weighted arithmetic mean, dr is the weighted geodesic
    mean of the step rotations mapped back to axis-angle, and the gripper is
    a weighted mean clipped to range (continuous) or a weighted vote with a
    conservative fallback to the highest-weight candidate when the top two
    class masses are closer than 0.1 (discrete). Callers that already hold
    each candidate's step rotation matrices can pass them aligned with
    candidates to skip recomputing the exponentials.
    """
    if gripper_mode not in GRIPPER_MODES:
        raise InvalidInputError(f"unknown gripper mode {gripper_mode!r}")
    candidates = list(candidates)
    if not candidates:
        raise InvalidInputError("cannot aggregate an empty candidate list")
    H = candidates[0].horizon
    if any(c.horizon != H for c in candidates):
        raise InvalidInputError("candidates have mismatched horizons")
    if step_rotations is not None and len(step_rotations) != len(candidates):
        raise InvalidInputError("step_rotations must align with candidates")
    w = _as_weight_array(weights, len(candidates))

    if len(candidates) == 1:
        # single candidate passes through untouched
        return candidates[0]

    order = _canonical_order(candidates, w)
    chunks = [candidates[i] for i in order]
    w = w[order]

    dp_all = np.stack([c.dp for c in chunks])  # (K, H, 3)
    g_all = np.stack([c.g for c in chunks])  # (K, H)
    if step_rotations is None:
        R_all = np.stack([c.step_rotations() for c in chunks])  # (K, H, 3, 3)
    else:
        R_all = np.stack([step_rotations[i] for i in order])

    dp_out = np.einsum("k,khj->hj", w, dp_all)

    init_idx = int(np.argmax(w))
    dr_out, ok, worst = _k.rotation_mean_rows_k(
        np.ascontiguousarray(R_all), w, init_idx, _MEAN_STEP_TOL, _MEAN_MAX_ITER
    )
    if not ok and worst >= _MEAN_RESIDUAL_TOL:
        raise ConvergenceError(
            f"rotation aggregation did not converge (residual {worst:.3e})",
            residual=float(worst),
        )

    if gripper_mode == GRIPPER_CONTINUOUS:
        g_out = np.clip(np.einsum("k,kh->h", w, g_all), GRIPPER_MIN, GRIPPER_MAX)
    else:
        g_out = np.empty(H)
        top_idx = int(np.argmax(w))  # canonical order breaks weight ties
        for h in range(H):
            classes, inverse = np.unique(g_all[:, h], return_inverse=True)
            mass = np.zeros(classes.size)
            np.add.at(mass, inverse, w)
            if classes.size == 1:
                g_out[h] = classes[0]
                continue
            ranked = np.argsort(mass)
            margin = mass[ranked[-1]] - mass[ranked[-2]]
            if margin < GRIPPER_VOTE_MARGIN:
                g_out[h] = g_all[top_idx, h]
            else:
                g_out[h] = classes[ranked[-1]]

    return ActionChunk(dp=dp_out, dr=dr_out, g=g_out)
