"""Compiled numeric kernels.

Everything here sits on the per-decision hot path (retrieval filtering and
prior aggregation run once per control step), so the scalar geometry and the
DTW recursions are compiled with numba. Public entry points with input
validation live in ``action_space`` and ``retrieval``; these kernels assume
clean inputs.
"""

import numba as nb
import numpy as np

# Branch thresholds for the axis-angle maps. The exp series threshold matches
# the documented small-angle contract; the log thresholds keep both the
# sin(theta) division and the near-pi eigen extraction well conditioned.
_EXP_SERIES_EPS = 1e-8
_LOG_SMALL_EPS = 1e-6
_LOG_PI_EPS = 1e-6


@nb.njit(cache=True)
def so3_exp_k(w):
    """Rodrigues map from an axis-angle vector to a rotation matrix."""
    t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2]
    t = np.sqrt(t2)
    if t < _EXP_SERIES_EPS:
        # second-order series for sin(t)/t and (1-cos(t))/t^2
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
    else:
        a = np.sin(t) / t
        b = (1.0 - np.cos(t)) / t2
    wx, wy, wz = w[0], w[1], w[2]
    R = np.empty((3, 3))
    # R = (1 - b*t^2) I + a * hat(w) + b * w w^T
    c = 1.0 - b * t2
    R[0, 0] = c + b * wx * wx
    R[0, 1] = b * wx * wy - a * wz
    R[0, 2] = b * wx * wz + a * wy
    R[1, 0] = b * wy * wx + a * wz
    R[1, 1] = c + b * wy * wy
    R[1, 2] = b * wy * wz - a * wx
    R[2, 0] = b * wz * wx - a * wy
    R[2, 1] = b * wz * wy + a * wx
    R[2, 2] = c + b * wz * wz
    return R


@nb.njit(cache=True)
def so3_log_k(R):
    """Inverse Rodrigues map, canonical representative with angle in [0, pi].

    Near zero the symmetric-difference series is used; near pi the axis is
    recovered from the symmetric part (the skew part vanishes there) and the
    sign is fixed to the first nonzero axis component when the skew part
    cannot break the tie.
    """
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    c = 0.5 * (tr - 1.0)
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    theta = np.arccos(c)

    # skew part: vee(R - R^T) = 2 sin(theta) * axis
    sx = R[2, 1] - R[1, 2]
    sy = R[0, 2] - R[2, 0]
    sz = R[1, 0] - R[0, 1]

    w = np.empty(3)
    if theta < _LOG_SMALL_EPS:
        w[0] = 0.5 * sx
        w[1] = 0.5 * sy
        w[2] = 0.5 * sz
        return w
    if theta < np.pi - _LOG_PI_EPS:
        k = 0.5 * theta / np.sin(theta)
        w[0] = k * sx
        w[1] = k * sy
        w[2] = k * sz
        return w

    # Near pi: (R + R^T)/2 - c*I = (1 - c) * a a^T.
    denom = 1.0 - c
    m00 = (R[0, 0] - c) / denom
    m11 = (R[1, 1] - c) / denom
    m22 = (R[2, 2] - c) / denom
    m01 = 0.5 * (R[0, 1] + R[1, 0]) / denom
    m02 = 0.5 * (R[0, 2] + R[2, 0]) / denom
    m12 = 0.5 * (R[1, 2] + R[2, 1]) / denom

    a = np.empty(3)
    if m00 >= m11 and m00 >= m22:
        a[0] = np.sqrt(max(m00, 0.0))
        if a[0] > 0.0:
            a[1] = m01 / a[0]
            a[2] = m02 / a[0]
        else:
            a[1] = 0.0
            a[2] = 0.0
    elif m11 >= m22:
        a[1] = np.sqrt(max(m11, 0.0))
        if a[1] > 0.0:
            a[0] = m01 / a[1]
            a[2] = m12 / a[1]
        else:
            a[0] = 0.0
            a[2] = 0.0
    else:
        a[2] = np.sqrt(max(m22, 0.0))
        if a[2] > 0.0:
            a[0] = m02 / a[2]
            a[1] = m12 / a[2]
        else:
            a[0] = 0.0
            a[1] = 0.0
    nrm = np.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    if nrm > 0.0:
        a /= nrm

    dot = sx * a[0] + sy * a[1] + sz * a[2]
    if dot < -1e-10:
        a = -a
    elif dot <= 1e-10:
        # angle is pi to machine precision: pick the representative whose
        # first nonzero component is nonnegative
        for i in range(3):
            if abs(a[i]) > 1e-12:
                if a[i] < 0.0:
                    a = -a
                break
    w[0] = theta * a[0]
    w[1] = theta * a[1]
    w[2] = theta * a[2]
    return w


@nb.njit(cache=True)
def geodesic_mean_k(Rs, ws, init_idx, step_tol, max_iter):
    """Weighted Karcher mean by fixed-point iteration.

    Returns (R, residual, converged). The residual is the norm of the last
    tangent-space update, which equals the weighted log-sum at the returned
    iterate when converged.
    """
    n = Rs.shape[0]
    R = Rs[init_idx].copy()
    residual = np.inf
    for _ in range(max_iter):
        d0 = 0.0
        d1 = 0.0
        d2 = 0.0
        for i in range(n):
            M = R.T @ np.ascontiguousarray(Rs[i])
            v = so3_log_k(M)
            d0 += ws[i] * v[0]
            d1 += ws[i] * v[1]
            d2 += ws[i] * v[2]
        residual = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if residual < step_tol:
            return R, residual, True
        step = np.empty(3)
        step[0] = d0
        step[1] = d1
        step[2] = d2
        R = R @ so3_exp_k(step)
    return R, residual, False


@nb.njit(cache=True)
def rotation_mean_rows_k(Rs, ws, init_idx, step_tol, max_iter):
    """Per-step geodesic means for stacked chunk rotations.

    Rs has shape (K, H, 3, 3); returns (dr (H, 3), ok flag, worst residual).
    """
    K, H = Rs.shape[0], Rs.shape[1]
    out = np.empty((H, 3))
    worst = 0.0
    ok = True
    buf = np.empty((K, 3, 3))
    for h in range(H):
        for i in range(K):
            buf[i] = Rs[i, h]
        R, res, conv = geodesic_mean_k(buf, ws, init_idx, step_tol, max_iter)
        if not conv:
            ok = False
        if res > worst:
            worst = res
        out[h] = so3_log_k(R)
    return out, ok, worst


@nb.njit(cache=True)
def dtw_dp_k(cost):
    """Path cost of the cheapest monotone alignment through a cost matrix.

    Classic dynamic program with match / insert / delete moves and no path
    normalization.
    """
    n, m = cost.shape
    D = np.empty((n, m))
    D[0, 0] = cost[0, 0]
    for j in range(1, m):
        D[0, j] = cost[0, j] + D[0, j - 1]
    for i in range(1, n):
        D[i, 0] = cost[i, 0] + D[i - 1, 0]
        for j in range(1, m):
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = cost[i, j] + best
    return D[n - 1, m - 1]


@nb.njit(cache=True)
def dtw_pairwise_k(dp, traces, g, w_rot, w_g, pair_i, pair_j):
    """DTW distances for the listed chunk pairs.

    dp: (K, H, 3) translations, traces: (K, K, H, H) pairwise rotation traces
    tr(Ra^T Rb), g: (K, H) gripper commands. Returns one distance per pair.
    """
    P = pair_i.shape[0]
    H = dp.shape[1]
    out = np.empty(P)
    cost = np.empty((H, H))
    for p in range(P):
        a = pair_i[p]
        b = pair_j[p]
        for i in range(H):
            for j in range(H):
                dx = dp[a, i, 0] - dp[b, j, 0]
                dy = dp[a, i, 1] - dp[b, j, 1]
                dz = dp[a, i, 2] - dp[b, j, 2]
                c = np.sqrt(dx * dx + dy * dy + dz * dz)
                tr = traces[a, b, i, j]
                ang = 0.5 * (tr - 1.0)
                if ang > 1.0:
                    ang = 1.0
                elif ang < -1.0:
                    ang = -1.0
                c += w_rot * np.arccos(ang)
                c += w_g * abs(g[a, i] - g[b, j])
                cost[i, j] = c
        out[p] = dtw_dp_k(cost)
    return out


def warmup():
    """Trigger JIT compilation of every kernel once."""
    w = np.array([0.1, -0.2, 0.3])
    R = so3_exp_k(w)
    so3_log_k(R)
    Rs = np.stack((R, so3_exp_k(-w)))
    ws = np.array([0.5, 0.5])
    geodesic_mean_k(Rs, ws, 0, 1e-10, 100)
    rotation_mean_rows_k(Rs.reshape(2, 1, 3, 3), ws, 0, 1e-10, 100)
    cost = np.abs(np.random.default_rng(0).standard_normal((4, 5)))
    dtw_dp_k(cost)
    dp = np.zeros((2, 3, 3))
    traces = np.full((2, 2, 3, 3), 3.0)
    g = np.zeros((2, 3))
    dtw_pairwise_k(dp, traces, g, 1.0, 0.25, np.array([0]), np.array([1]))
