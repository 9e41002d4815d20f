"""EKF update machinery: chi-square gating, measurement compression, the
Joseph-form state update, and the loop-closure update against stored map
points.

Updates are triggered when a feature is no longer tracked or when the sliding
window overflows; residual blocks from points and lines are stacked into one
joint update.  Loop-closure blocks reproject keyframe-era map points against
the current clone and skip feature marginalization entirely, since those
points were already marginalized when their keyframe left the window.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .errors import AllGated, BehindCamera, SingularInnovation
from .point_meas import PointTrack, ResidualBlock, StereoObservation, StereoRig, point_residual_jacobian
from .state import FilterState, inject_error


@dataclass
class UpdateConfig:
    """Measurement noise and gating knobs shared by all update paths."""
    sigma_point: float = 0.002   # normalized units; ~1 px at f = 500 px
    sigma_line: float = 0.002
    sigma_loop: float = 0.004    # 2x sigma_point: map points are not perfect priors
    chi2_confidence: float = 0.95
    max_stacked_rows: int = 1500
    # Optional map-point uncertainty (meters): inflates the loop measurement
    # noise by map_sigma / depth so stored positions are soft priors.
    loop_map_sigma: float = 0.0

    def __post_init__(self):
        if min(self.sigma_point, self.sigma_line, self.sigma_loop) <= 0.0:
            raise ValueError("measurement sigmas must be strictly positive")
        if not 0.0 < self.chi2_confidence < 1.0:
            raise ValueError("chi2_confidence must lie in (0, 1)")


@lru_cache(maxsize=512)
def _chi2_threshold(dof: int, confidence: float) -> float:
    return float(chi2.ppf(confidence, dof))


def chi2_gate(block: ResidualBlock, cov: np.ndarray, cfg: UpdateConfig) -> bool:
    """Mahalanobis gate: accept iff r^T (H P H^T + sigma^2 I)^-1 r is below
    the chi-square quantile at cfg.chi2_confidence with dof = len(r)."""
    H = block.H_X
    r = block.r
    if r.size == 0:
        return False
    S = H @ cov @ H.T + block.noise_sigma ** 2 * np.eye(H.shape[0])
    try:
        c, low = scipy.linalg.cho_factor(S)
        gamma = float(r @ scipy.linalg.cho_solve((c, low), r))
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularInnovation(str(exc)) from exc
    if not np.isfinite(gamma):
        raise SingularInnovation("non-finite gating statistic")
    return gamma < _chi2_threshold(r.size, cfg.chi2_confidence)


def compress(blocks: list[ResidualBlock]) -> ResidualBlock:
    """Whiten, stack, and QR-reduce residual blocks.

    The returned block has unit noise and at most state-dimension rows; the
    orthogonal reduction leaves the EKF update mathematically unchanged.
    """
    if not blocks:
        raise ValueError("nothing to compress")
    dims = {b.H_X.shape[1] for b in blocks}
    if len(dims) != 1:
        raise ValueError(f"blocks disagree on state dimension: {dims}")
    r = np.concatenate([b.r / b.noise_sigma for b in blocks])
    H = np.vstack([b.H_X / b.noise_sigma for b in blocks])
    if H.shape[0] > H.shape[1]:
        Q, R = np.linalg.qr(H, mode="reduced")
        H = R
        r = Q.T @ r
    return ResidualBlock(r, H, 1.0)


def ekf_update(state: FilterState, block: ResidualBlock) -> FilterState:
    """Kalman update with Joseph-form covariance for numerical robustness."""
    if block.rows == 0:
        return state
    H = block.H_X
    r = block.r
    P = state.cov
    R = block.noise_sigma ** 2 * np.eye(H.shape[0])
    S = H @ P @ H.T + R
    try:
        c, low = scipy.linalg.cho_factor(S)
        K = scipy.linalg.cho_solve((c, low), H @ P).T
    except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
        raise SingularInnovation(str(exc)) from exc

    dx = K @ r
    inject_error(state, dx)

    I_KH = np.eye(P.shape[0]) - K @ H
    state.cov = I_KH @ P @ I_KH.T + K @ R @ K.T
    state.symmetrize()
    return state


@dataclass
class LoopMatch:
    """One verified loop correspondence: stored map point vs current observation."""
    p_map: np.ndarray
    obs: StereoObservation

    def __post_init__(self):
        self.p_map = np.asarray(self.p_map, dtype=float)


def loop_closure_update(state: FilterState, matches: list[LoopMatch],
                        cfg: UpdateConfig, rig: StereoRig) -> FilterState:
    """EKF update against keyframe-era map points.

    Map positions are treated as priors: the Jacobian has no feature columns
    and no nullspace projection, so the update relocates the window onto the
    stored map.  Each match is gated individually; rejecting them all rejects
    the loop as a geometric outlier.  No observability fix is applied here:
    with a prior map the global pose is genuinely observable, and projecting
    the Jacobian onto the drift directions would both starve the gate and
    cancel the correction this update exists to make.
    """
    survivors = []
    for match in matches:
        track = PointTrack(0, [match.obs])
        try:
            r, H_X, _ = point_residual_jacobian(track, match.p_map, state, rig)
        except BehindCamera:
            continue
        sigma = cfg.sigma_loop
        if cfg.loop_map_sigma > 0.0 and state.clones:
            depth = max(0.5, float(np.linalg.norm(
                match.p_map - state.clones[-1].pose.position)))
            sigma = float(np.hypot(sigma, cfg.loop_map_sigma / depth))
        block = ResidualBlock(r, H_X, sigma)
        try:
            if chi2_gate(block, state.cov, cfg):
                survivors.append(block)
        except SingularInnovation:
            continue
    if not survivors:
        raise AllGated(f"all {len(matches)} loop matches failed the chi-square gate")
    return ekf_update(state, compress(survivors))
