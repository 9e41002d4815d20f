"""Trajectory evaluation: absolute trajectory error after rigid alignment,
the median-of-n repeat protocol, and filter-consistency (NEES) helpers."""

from __future__ import annotations

import numpy as np

from .errors import NoOverlap
from .geom import Pose, quat_multiply
from .io import TrajectorySample
from .state import FilterState


def associate(est: list[TrajectorySample], gt: list[TrajectorySample],
              tol_ns: int = 1_000_000):
    """Greedy timestamp association within tol_ns (default 1 ms)."""
    pairs = []
    j = 0
    for i, e in enumerate(est):
        while j + 1 < len(gt) and abs(gt[j + 1].timestamp - e.timestamp) <= \
                abs(gt[j].timestamp - e.timestamp):
            j += 1
        if abs(gt[j].timestamp - e.timestamp) <= tol_ns:
            pairs.append((i, j))
    if not pairs:
        raise NoOverlap("no timestamp pairs within tolerance")
    return pairs


def rigid_align(src: np.ndarray, dst: np.ndarray):
    """Closed-form rotation+translation (scale fixed at 1) minimizing
    sum ||R src + t - dst||^2."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    W = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def evaluate_ate(est: list[TrajectorySample], gt: list[TrajectorySample],
                 tol_ns: int = 1_000_000) -> dict:
    """RMSE of position residuals after rigid alignment of est onto gt."""
    pairs = associate(est, gt, tol_ns)
    P_est = np.array([est[i].pose.position for i, _ in pairs])
    P_gt = np.array([gt[j].pose.position for _, j in pairs])
    R, t = rigid_align(P_est, P_gt)
    residual = P_est @ R.T + t - P_gt
    per_pose = np.linalg.norm(residual, axis=1)
    return {
        "rmse_m": float(np.sqrt(np.mean(per_pose ** 2))),
        "per_pose_errors": per_pose,
        "rotation": R,
        "translation": t,
        "n_pairs": len(pairs),
    }


def median_protocol(run, n: int = 5, base_seed: int = 1):
    """Run a repeatable experiment with n distinct seeds and report the
    median result.  `run` is a callable seed -> scalar.  Returns
    (median, per-run values)."""
    if n % 2 == 0:
        raise ValueError("median protocol needs an odd repeat count")
    values = [float(run(base_seed + i)) for i in range(n)]
    return float(np.median(values)), values


def pose_nees(state: FilterState, gt_body_pose: Pose) -> float:
    """Normalized estimation error squared of the 6-DOF IMU pose.

    The error convention matches inject_error: dq = q_gt * q_hat^-1 composed
    from the left, position error additive.  Chi-square with 6 dof when the
    filter is consistent."""
    dq = quat_multiply(gt_body_pose.rotation, state.imu.q_GB.inverse())
    dtheta = 2.0 * dq.vec / dq.w
    dp = gt_body_pose.position - state.imu.p_GB
    err = np.concatenate([dtheta, dp])
    idx = np.r_[0:3, 12:15]
    P = state.cov[np.ix_(idx, idx)]
    return float(err @ np.linalg.solve(P, err))
