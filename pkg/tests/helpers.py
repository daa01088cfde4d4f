"""Shared generators and oracles for the test suite."""

import numpy as np

from memsteer.action_space import ActionChunk, canonicalize_axis_angle


def random_rotvec(rng: np.random.Generator, max_angle: float = np.pi * 0.98) -> np.ndarray:
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_chunk(rng: np.random.Generator, horizon: int = 8) -> ActionChunk:
    dp = rng.uniform(-1.0, 1.0, size=(horizon, 3))
    dr = np.stack([random_rotvec(rng) for _ in range(horizon)])
    g = rng.uniform(0.0, 1.0, size=horizon)
    return ActionChunk(dp=dp, dr=dr, g=g)


def perturbed_chunk(base: ActionChunk, rng: np.random.Generator, scale: float) -> ActionChunk:
    dp = base.dp + scale * rng.standard_normal(base.dp.shape)
    dr = np.stack([
        canonicalize_axis_angle(base.dr[h] + scale * rng.standard_normal(3))
        for h in range(base.horizon)
    ])
    g = np.clip(base.g + scale * rng.standard_normal(base.horizon), 0.0, 1.0)
    return ActionChunk(dp=dp, dr=dr, g=g)


def dtw_cost_matrix(a: ActionChunk, b: ActionChunk, rot_w: float, grip_w: float) -> np.ndarray:
    """Per-cell alignment cost, rebuilt independently of the library."""
    Ra = a.step_rotations()
    Rb = b.step_rotations()
    cost = np.zeros((a.horizon, b.horizon))
    for i in range(a.horizon):
        for j in range(b.horizon):
            tr = float(np.trace(Ra[i].T @ Rb[j]))
            angle = np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))
            cost[i, j] = (
                np.linalg.norm(a.dp[i] - b.dp[j])
                + rot_w * angle
                + grip_w * abs(a.g[i] - b.g[j])
            )
    return cost


def dtw_enumerate(cost: np.ndarray) -> float:
    """Exhaustive minimum over all monotone warping paths.

    Paths start at (0, 0), end at the last cell, and move by (1, 0), (0, 1),
    or (1, 1); the path cost is the sum of visited cells. Exponential, only
    for small matrices.
    """
    n, m = cost.shape
    best = [np.inf]

    def walk(i: int, j: int, acc: float) -> None:
        acc += cost[i, j]
        if acc >= best[0]:
            return  # cannot improve; costs are nonnegative
        if i == n - 1 and j == m - 1:
            best[0] = acc
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)

    walk(0, 0, 0.0)
    return float(best[0])


def chunks_equal(a: ActionChunk, b: ActionChunk) -> bool:
    return (
        np.array_equal(a.dp, b.dp)
        and np.array_equal(a.dr, b.dr)
        and np.array_equal(a.g, b.g)
    )
