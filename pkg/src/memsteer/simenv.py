"""Deterministic kinematic pick-and-place environment.

Tabletop world in normalized units: objects rest on the z=0 plane, the
gripper is a free-flying point with orientation. No contact dynamics;
grasping is proximity plus gripper state. Each task is an ordered list of
stages (move object i into target region i). Ground-truth completion G
blends finished stages with a shaped fraction of the current one, so
progress is visible at chunk granularity.

Scripted planners (expert, wrong-target, overshoot) close the loop from any
reachable state and double as the mode means of the generative base policy.
They share the env's motion helper, so a noise-free expert mode tracks the
true kinematics exactly.

Feature vector layout (fixed):
  [gripper_pos(3), gripper_rot(9, row-major), gripper_closed(1),
   stage_index(1)] + per object [pos(3), rot(9), held(1)]
"""

from __future__ import annotations

import dataclasses
import functools
import json
from typing import Optional

import numpy as np

from ._kernels import so3_exp_k, so3_log_k
from .action_space import ActionChunk, canonicalize_axis_angle
from .errors import InvalidInputError

ACTION_SCALE = 0.1  # world units per unit of normalized dp, per step
GRIPPER_OPEN = 0.1
GRIPPER_CLOSED = 0.9
HOME_POS = np.array([0.0, 0.0, 0.4])
CARRY_HEIGHT = 0.12  # transport height for held objects
GRIP_TERM_CAP = 0.12  # cap on the gripper-approach term of the shaped distance
DEFAULT_HORIZON = 8
_WORKSPACE = 1.0  # |x|,|y| bound; z in [0, 1]
_FEATURE_ANCHOR = 32.0  # constant feature channel; sets the key-similarity scale


@dataclasses.dataclass(frozen=True)
class ObjectSpec:
    name: str
    base_pos: tuple  # nominal spawn center (x, y, 0)


@dataclasses.dataclass(frozen=True)
class StageSpec:
    object_index: int  # which object this stage moves
    target_center: tuple  # placement point on the table
    grasp_tol: float = 0.06  # grasp proximity and toggle radius
    target_radius: float = 0.07  # placement tolerance
    rot_tol: float = float(np.pi)  # orientation tolerance (pi = ungated)


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    objects: tuple  # ObjectSpec per object
    stages: tuple  # StageSpec in execution order
    distractor: StageSpec  # decoy goal used by the wrong-target mode
    step_budget: int = 40  # chunks before the episode is cut off
    spawn_jitter: float = 0.03  # uniform +-jitter on object spawn x, y

    def __post_init__(self):
        if len(self.stages) < 1:
            raise InvalidInputError("a task needs at least one stage")
        n = len(self.objects)
        for s in tuple(self.stages) + (self.distractor,):
            if not (0 <= s.object_index < n):
                raise InvalidInputError(f"stage references object {s.object_index} of {n}")

    @property
    def n_stages(self) -> int:
        return len(self.stages)


@dataclasses.dataclass(frozen=True, eq=False)
class Observation:
    """Snapshot of the world as the policy sees it.

    completion and task_id ride along for progress evaluation; they are not
    part of the feature vector.
    """

    gripper_pos: np.ndarray
    gripper_rot: np.ndarray
    gripper_closed: bool
    object_positions: np.ndarray  # (n_objects, 3)
    object_rotations: np.ndarray  # (n_objects, 3, 3)
    held_object: Optional[int]
    stage_index: int
    completion: float
    task_id: str

    @functools.cached_property
    def feature_vector(self) -> np.ndarray:
        n = self.object_positions.shape[0]
        # constant anchor channel keeps same-state key cosines inside the
        # retrieval gate's working band; state changes still clear the gate
        parts = [
            [_FEATURE_ANCHOR],
            self.gripper_pos,
            self.gripper_rot.ravel(),
            [1.0 if self.gripper_closed else 0.0, float(self.stage_index)],
        ]
        for i in range(n):
            parts.append(self.object_positions[i])
            parts.append(self.object_rotations[i].ravel())
            parts.append([1.0 if self.held_object == i else 0.0])
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


@dataclasses.dataclass(frozen=True)
class EnvStatus:
    done: bool
    true_success: bool
    completion_fraction: float
    step_count: int  # chunks executed so far


def apply_motion(pos: np.ndarray, world_dp: np.ndarray) -> np.ndarray:
    """One translation step with workspace clamping. Shared by env and planners."""
    new = pos + world_dp
    return np.array([
        min(max(new[0], -_WORKSPACE), _WORKSPACE),
        min(max(new[1], -_WORKSPACE), _WORKSPACE),
        min(max(new[2], 0.0), _WORKSPACE),
    ])


def _orthonormalize(R: np.ndarray) -> np.ndarray:
    # nearest rotation via polar decomposition; curbs drift from long products
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] = -u[:, -1]
        out = u @ vt
    return out


class ManipEnv:
    """Closed-loop chunk executor for one episode at a time."""

    def __init__(self, task: TaskSpec, horizon: int = DEFAULT_HORIZON):
        if horizon < 1:
            raise InvalidInputError("horizon must be >= 1")
        self.task = task
        self.horizon = horizon
        self._ready = False

    # -- state queries ------------------------------------------------------

    def _subgoal_distance(self) -> float:
        stage = self.task.stages[self._stage]
        obj = self._obj_pos[stage.object_index]
        beta = float(np.linalg.norm(obj - np.asarray(stage.target_center)))
        if self._held == stage.object_index:
            gamma = 0.0
        else:
            gamma = min(float(np.linalg.norm(self._grip_pos - obj)), GRIP_TERM_CAP)
        return gamma + beta

    def completion(self) -> float:
        if self._stage >= self.task.n_stages:
            return 1.0
        shaped = 1.0 - min(max(self._subgoal_distance() / self._d_init, 0.0), 1.0)
        return (self._stage + shaped) / self.task.n_stages

    def _observe(self) -> Observation:
        return Observation(
            gripper_pos=self._grip_pos.copy(),
            gripper_rot=self._grip_rot.copy(),
            gripper_closed=self._closed,
            object_positions=self._obj_pos.copy(),
            object_rotations=self._obj_rot.copy(),
            held_object=self._held,
            stage_index=self._stage,
            completion=self.completion(),
            task_id=self.task.task_id,
        )

    def _status(self) -> EnvStatus:
        return EnvStatus(
            done=self._done,
            true_success=self._stage >= self.task.n_stages,
            completion_fraction=self.completion(),
            step_count=self._chunks,
        )

    def stage_completion_vector(self) -> tuple:
        """Per-stage 0/1 credit; its sum is the completed-length metric."""
        return tuple(1 if i < self._stage else 0 for i in range(self.task.n_stages))

    # -- lifecycle ----------------------------------------------------------

    def reset(self, seed: int) -> Observation:
        rng = np.random.default_rng(seed)
        n = len(self.task.objects)
        j = self.task.spawn_jitter
        self._obj_pos = np.zeros((n, 3))
        self._obj_rot = np.stack([np.eye(3)] * n)
        for i, spec in enumerate(self.task.objects):
            base = np.asarray(spec.base_pos, dtype=np.float64)
            self._obj_pos[i] = base + np.array([rng.uniform(-j, j), rng.uniform(-j, j), 0.0])
        self._grip_pos = HOME_POS.copy()
        self._grip_rot = np.eye(3)
        self._closed = False
        self._held = None
        self._stage = 0
        self._chunks = 0
        self._done = False
        self._trace = []
        self._d_init = max(self._subgoal_distance(), 1e-6)
        self._ready = True
        return self._observe()

    def _advance_stages(self) -> None:
        while self._stage < self.task.n_stages:
            stage = self.task.stages[self._stage]
            if self._held == stage.object_index:
                return
            obj = self._obj_pos[stage.object_index]
            if np.linalg.norm(obj - np.asarray(stage.target_center)) > stage.target_radius:
                return
            rot = self._obj_rot[stage.object_index]
            angle = np.arccos(min(max((np.trace(rot) - 1.0) / 2.0, -1.0), 1.0))
            if angle > stage.rot_tol:
                return
            self._stage += 1
            if self._stage < self.task.n_stages:
                self._d_init = max(self._subgoal_distance(), 1e-6)

    def step_chunk(self, chunk: ActionChunk):
        if not self._ready:
            raise InvalidInputError("reset the environment before stepping")
        if self._done:
            raise InvalidInputError("episode is done; reset before stepping")
        if chunk.horizon != self.horizon:
            raise InvalidInputError(
                f"chunk horizon {chunk.horizon} != environment horizon {self.horizon}"
            )
        for h in range(self.horizon):
            self._grip_pos = apply_motion(self._grip_pos, ACTION_SCALE * chunk.dp[h])
            self._grip_rot = self._grip_rot @ so3_exp_k(chunk.dr[h])
            g = chunk.g[h]
            if not self._closed and g > 0.5:
                self._closed = True
                stage_tol = self.task.stages[min(self._stage, self.task.n_stages - 1)].grasp_tol
                dists = np.linalg.norm(self._obj_pos - self._grip_pos, axis=1)
                nearest = int(np.argmin(dists))
                if dists[nearest] <= stage_tol:
                    self._held = nearest
                    self._obj_pos[nearest] = self._grip_pos.copy()
            elif self._closed and g < 0.5:
                self._closed = False
                if self._held is not None:
                    self._obj_pos[self._held][2] = 0.0  # released objects drop to the table
                    self._held = None
            if self._held is not None:
                self._obj_pos[self._held] = self._grip_pos.copy()
                self._obj_rot[self._held] = self._grip_rot
            self._advance_stages()
        self._grip_rot = _orthonormalize(self._grip_rot)
        if self._held is not None:
            self._obj_rot[self._held] = self._grip_rot
        self._chunks += 1
        if self._stage >= self.task.n_stages or self._chunks >= self.task.step_budget:
            self._done = True
        self._trace.append({
            "chunk": self._chunks,
            "gripper_pos": [round(float(v), 6) for v in self._grip_pos],
            "stage": self._stage,
            "G": round(self.completion(), 6),
            "held": self._held,
        })
        return self._observe(), self._status()

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self._trace:
                fh.write(json.dumps(rec) + "\n")


# -- task suite -------------------------------------------------------------


def task_suite() -> tuple:
    """Three pick-and-place tasks of increasing stage count."""
    t1 = TaskSpec(
        task_id="T1",
        instruction="put the red block in the left bin",
        objects=(
            ObjectSpec("red_block", (0.25, 0.15, 0.0)),
            ObjectSpec("blue_block", (-0.2, 0.25, 0.0)),
        ),
        stages=(StageSpec(object_index=0, target_center=(-0.25, -0.2, 0.0)),),
        distractor=StageSpec(object_index=1, target_center=(0.3, -0.3, 0.0)),
        step_budget=4,
    )
    t2 = TaskSpec(
        task_id="T2",
        instruction="put the soup can then the sauce jar in the basket",
        objects=(
            ObjectSpec("soup_can", (0.5, 0.3, 0.0)),
            ObjectSpec("sauce_jar", (-0.45, 0.38, 0.0)),
            # decoy placed opposite the first pick: a reach for it is nearly
            # antipodal to the expert's opening move, so the two modes are far
            # apart in action space and the lost chunk cannot be recovered
            ObjectSpec("pepper_tin", (-0.45, -0.3, 0.0)),
        ),
        stages=(
            # tight grasp tolerance: replaying a trajectory recorded under a
            # different spawn misses the can by more than this
            StageSpec(object_index=0, target_center=(-0.2, -0.5, 0.0), grasp_tol=0.05),
            StageSpec(object_index=1, target_center=(0.3, -0.45, 0.0), grasp_tol=0.05),
        ),
        distractor=StageSpec(object_index=2, target_center=(-0.75, -0.1, 0.0)),
        step_budget=4,
        # wide spawn scatter: stored trajectories from other spawns miss the
        # current object by up to ~0.28, far beyond the grasp tolerance
        spawn_jitter=0.2,
    )
    t3 = TaskSpec(
        task_id="T3",
        instruction="rack the four tubes left to right",
        objects=(
            ObjectSpec("tube_a", (-0.3, 0.3, 0.0)),
            ObjectSpec("tube_b", (-0.1, 0.3, 0.0)),
            ObjectSpec("tube_c", (0.1, 0.3, 0.0)),
            ObjectSpec("tube_d", (0.3, 0.3, 0.0)),
        ),
        stages=(
            StageSpec(object_index=0, target_center=(-0.3, -0.3, 0.0)),
            StageSpec(object_index=1, target_center=(-0.1, -0.3, 0.0)),
            StageSpec(object_index=2, target_center=(0.1, -0.3, 0.0)),
            StageSpec(object_index=3, target_center=(0.3, -0.3, 0.0)),
        ),
        distractor=StageSpec(object_index=3, target_center=(0.0, 0.45, 0.0)),
        step_budget=12,
    )
    return (t1, t2, t3)


def get_task(task_id: str) -> TaskSpec:
    for task in task_suite():
        if task.task_id == task_id:
            return task
    raise InvalidInputError(f"unknown task {task_id!r}")


# -- scripted planners ------------------------------------------------------

_STEP = ACTION_SCALE  # max world translation per step
_STEP_FAST = 3.0 * ACTION_SCALE  # pacing speed cap for paced plans
_ROT_NUDGE = 0.15  # max per-step corrective rotation


def _step_toward(pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    vec = goal - pos
    dist = float(np.linalg.norm(vec))
    if dist <= _STEP or dist < 1e-12:
        return vec
    return vec * (_STEP / dist)


def _rotation_nudges(R: np.ndarray, horizon: int) -> np.ndarray:
    """Per-step axis-angle increments steering the gripper back to identity."""
    w = canonicalize_axis_angle(-so3_log_k(np.ascontiguousarray(R)))
    angle = float(np.linalg.norm(w))
    if angle < 1e-12:
        return np.zeros((horizon, 3))
    per = min(_ROT_NUDGE, angle / horizon)
    return np.tile(w * (per / angle), (horizon, 1))


def _transport_chain(pos: np.ndarray, target: np.ndarray, radius: float) -> list:
    """Waypoints of the carry route: rise, traverse at height, descend."""
    err = target - pos
    if float(np.linalg.norm(err[:2])) <= max(radius, 0.06):
        return [target]
    chain = []
    if pos[2] < CARRY_HEIGHT - 0.02:
        chain.append(np.array([pos[0], pos[1], CARRY_HEIGHT]))
    chain.append(np.array([target[0], target[1], CARRY_HEIGHT]))
    chain.append(target)
    return chain


def _paced_step(pos: np.ndarray, chain: list, rows_left: int) -> np.ndarray:
    """One step along the waypoint chain, paced to finish in rows_left rows.

    Spreads the remaining route length evenly so arrival lands on the last
    motion row regardless of how long the route is; speed is capped so far
    goals simply roll over into the next chunk.
    """
    length = 0.0
    prev = pos
    for wp in chain:
        length += float(np.linalg.norm(wp - prev))
        prev = wp
    if length < 1e-12:
        return np.zeros(3)
    step = min(length / max(rows_left, 1), _STEP_FAST)
    # walk the chain so waypoint corners do not eat part of the row's budget
    cur = pos
    for wp in chain:
        vec = wp - cur
        dist = float(np.linalg.norm(vec))
        if dist >= step or dist < 1e-12:
            if dist > 1e-12:
                cur = cur + vec * (step / dist)
            break
        cur = wp
        step -= dist
    return cur - pos


def _plan_to_goal(task: TaskSpec, obs: Observation, goal: StageSpec, horizon: int,
                  *, allow_gripper: bool = True) -> ActionChunk:
    """Paced virtual rollout toward one (object -> target) goal.

    Mirrors the env kinematics step for step, so executing the plan without
    noise lands where the plan says. Motion is paced so that the gripper
    event (grasp or release) falls on the chunk's final row: one chunk picks,
    the next places, and chunks recorded under different spawns stay row-for-
    row comparable. With allow_gripper=False the gripper state is left
    untouched (no grasps, no releases).
    """
    dp = np.zeros((horizon, 3))
    g = np.zeros(horizon)
    obj = obs.object_positions[goal.object_index].copy()
    target = np.asarray(goal.target_center, dtype=np.float64)
    pos = obs.gripper_pos.copy()
    closed = obs.gripper_closed
    held = obs.held_object  # index or None, virtual
    placed = False
    for h in range(horizon):
        g_cmd = GRIPPER_CLOSED if closed else GRIPPER_OPEN
        world = np.zeros(3)
        last_row = h == horizon - 1
        rows_left = horizon - 1 - h  # motion rows before the event row
        if placed:
            pass  # goal reached: hold pose
        elif held is not None and held != goal.object_index:
            # holding the wrong object: put it down where we stand
            if allow_gripper:
                g_cmd = GRIPPER_OPEN
                closed = False
                held = None
        elif held is None:
            if closed:
                # empty pinch: open before re-approaching
                if allow_gripper:
                    g_cmd = GRIPPER_OPEN
                    closed = False
            else:
                dist = float(np.linalg.norm(obj - pos))
                if last_row and dist <= goal.grasp_tol * 0.7:
                    if allow_gripper:
                        g_cmd = GRIPPER_CLOSED
                        closed = True
                        held = goal.object_index
                        obj = pos.copy()
                elif not last_row:
                    world = _paced_step(pos, [obj], rows_left)
        else:
            # transporting the goal object
            err = target - pos
            if last_row and float(np.linalg.norm(err)) <= goal.target_radius * 0.5:
                if allow_gripper:
                    g_cmd = GRIPPER_OPEN
                    closed = False
                    held = None
                    placed = True
            elif not last_row:
                world = _paced_step(
                    pos, _transport_chain(pos, target, goal.target_radius), rows_left)
        pos = apply_motion(pos, world)
        if held is not None:
            obj = pos.copy()
        dp[h] = world / ACTION_SCALE
        g[h] = g_cmd
    return ActionChunk(dp=dp, dr=_rotation_nudges(obs.gripper_rot, horizon), g=g)


def _hold_pose_chunk(obs: Observation, horizon: int) -> ActionChunk:
    g = GRIPPER_CLOSED if obs.gripper_closed else GRIPPER_OPEN
    return ActionChunk(
        dp=np.zeros((horizon, 3)),
        dr=np.zeros((horizon, 3)),
        g=np.full(horizon, g),
    )


def expert_chunk(task: TaskSpec, obs: Observation, horizon: int = DEFAULT_HORIZON) -> ActionChunk:
    """Next chunk of the scripted expert for the current stage."""
    if obs.stage_index >= task.n_stages:
        return _hold_pose_chunk(obs, horizon)
    return _plan_to_goal(task, obs, task.stages[obs.stage_index], horizon)


def wrong_target_chunk(task: TaskSpec, obs: Observation,
                       horizon: int = DEFAULT_HORIZON) -> ActionChunk:
    """Distractor obsessed with the decoy object.

    With a free hand it reaches for and picks up the decoy; holding anything
    it drops the load on the spot and pulls back to the home hover, clearing
    the hand for another grab. Either way the chunk opposes every productive
    plan and cannot be recovered within a tight step budget.
    """
    if obs.held_object is not None:
        home = np.asarray(HOME_POS, dtype=np.float64)
        dp = np.zeros((horizon, 3))
        pos = obs.gripper_pos.copy()
        for h in range(horizon):
            world = _step_toward(pos, home)
            pos = apply_motion(pos, world)
            dp[h] = world / ACTION_SCALE
        return ActionChunk(dp=dp, dr=_rotation_nudges(obs.gripper_rot, horizon),
                           g=np.full(horizon, GRIPPER_OPEN))
    decoy = obs.object_positions[task.distractor.object_index].copy()
    tol = task.distractor.grasp_tol
    dp = np.zeros((horizon, 3))
    g = np.zeros(horizon)
    pos = obs.gripper_pos.copy()
    closed = obs.gripper_closed
    for h in range(horizon):
        g_cmd = GRIPPER_CLOSED if closed else GRIPPER_OPEN
        world = np.zeros(3)
        if closed:
            pass  # prize in hand: freeze and run out the clock
        elif float(np.linalg.norm(decoy - pos)) <= tol * 0.7:
            g_cmd = GRIPPER_CLOSED
            closed = True
        else:
            world = _step_toward(pos, decoy)
        pos = apply_motion(pos, world)
        dp[h] = world / ACTION_SCALE
        g[h] = g_cmd
    return ActionChunk(dp=dp, dr=_rotation_nudges(obs.gripper_rot, horizon), g=g)


def overshoot_chunk(task: TaskSpec, obs: Observation, horizon: int = DEFAULT_HORIZON,
                    factor: float = 1.3) -> ActionChunk:
    """Expert plan with translations scaled past their marks.

    Gripper timing stays the expert's, so grasps can miss and releases can
    land outside the target region.
    """
    base = expert_chunk(task, obs, horizon)
    return ActionChunk(dp=base.dp * factor, dr=base.dr, g=base.g.copy())
