"""Point-feature measurement model: triangulation, stereo reprojection
residuals and Jacobians, and nullspace marginalization of the feature.

All image coordinates are normalized (intrinsics applied at ingestion), so the
pinhole model is z = [X/Z, Y/Z] and measurement noise is isotropic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCamera,
    DivergedTriangulation,
    InsufficientBaseline,
    NegativeDepth,
    RankDeficient,
)
from .geom import Pose, UnitQuaternion, skew
from .state import FilterState

Z_MIN = 1e-3


@dataclass
class StereoRig:
    """Fixed left-right calibration: rotation left->right and the right-camera
    origin expressed in the left-camera frame."""
    rotation_lr: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    baseline: np.ndarray = field(default_factory=lambda: np.array([0.1, 0.0, 0.0]))

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float)

    def right_pose(self, left_pose: Pose) -> Pose:
        return Pose(self.rotation_lr, self.baseline).compose(left_pose)


@dataclass
class StereoObservation:
    frame_id: int
    left_uv: np.ndarray
    right_uv: np.ndarray | None = None

    def __post_init__(self):
        self.left_uv = np.asarray(self.left_uv, dtype=float)
        if self.right_uv is not None:
            self.right_uv = np.asarray(self.right_uv, dtype=float)


class PointTrack:
    """All continuous stereo observations of one landmark."""

    __slots__ = ("track_id", "observations")

    def __init__(self, track_id: int, observations=None):
        self.track_id = int(track_id)
        self.observations: list[StereoObservation] = []
        for obs in observations or []:
            self.add(obs)

    def add(self, obs: StereoObservation) -> None:
        if self.observations and obs.frame_id <= self.observations[-1].frame_id:
            raise ValueError("track frame_ids must be strictly increasing")
        self.observations.append(obs)

    def __len__(self) -> int:
        return len(self.observations)


@dataclass
class ResidualBlock:
    """Stacked residual with its state Jacobian, ready for the EKF update."""
    r: np.ndarray
    H_X: np.ndarray
    noise_sigma: float
    # max |A^T H_f| of the marginalization that produced this block (0 when
    # no marginalization was involved); diagnostic for nullspace exactness.
    nullspace_residual: float = 0.0

    def __post_init__(self):
        self.r = np.atleast_1d(np.asarray(self.r, dtype=float))
        self.H_X = np.atleast_2d(np.asarray(self.H_X, dtype=float))
        if self.H_X.shape[0] != self.r.shape[0]:
            raise ValueError("residual and Jacobian row counts differ")

    @property
    def rows(self) -> int:
        return self.r.shape[0]


def pinhole_project(p_cam, z_min: float = Z_MIN) -> np.ndarray:
    """Normalized pinhole projection [X/Z, Y/Z]."""
    p = np.asarray(p_cam, dtype=float)
    if p[2] <= z_min:
        raise BehindCamera(f"point depth {p[2]:.4g} <= {z_min}")
    return p[:2] / p[2]


def projection_jacobian(p_cam) -> np.ndarray:
    """d[X/Z, Y/Z] / d[X, Y, Z]."""
    X, Y, Z = p_cam
    inv_z = 1.0 / Z
    return inv_z * np.array([[1.0, 0.0, -X * inv_z],
                             [0.0, 1.0, -Y * inv_z]])


@dataclass
class TriangulationConfig:
    min_baseline: float = 0.02
    max_iterations: int = 10
    step_tolerance: float = 1e-8
    reprojection_gate: float = 0.01  # mean residual, normalized units


def _gather_cameras(track: PointTrack, state: FilterState, rig: StereoRig):
    """Flatten a track into per-camera (pose, observation) pairs."""
    cams = []
    for obs in track.observations:
        clone = state.clone_by_frame(obs.frame_id)
        cams.append((clone.pose, obs.left_uv))
        if obs.right_uv is not None:
            cams.append((rig.right_pose(clone.pose), obs.right_uv))
    return cams


def _linear_triangulate(cams) -> np.ndarray:
    """Linear (DLT) triangulation over all views; least-squares in 3D point."""
    A = np.zeros((2 * len(cams), 3))
    b = np.zeros(2 * len(cams))
    for i, (pose, uv) in enumerate(cams):
        C = pose.rotation.rotation_matrix()
        t = pose.position
        rows = np.vstack([C[0] - uv[0] * C[2], C[1] - uv[1] * C[2]])
        A[2 * i:2 * i + 2] = rows
        b[2 * i:2 * i + 2] = rows @ t
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    return sol


def triangulate(track: PointTrack, state: FilterState, rig: StereoRig,
                cfg: TriangulationConfig | None = None) -> np.ndarray:
    """Estimate the landmark position by DLT initialization followed by
    Gauss-Newton on an inverse-depth parameterization anchored at the first
    observing camera.  Returns the point in the global frame."""
    cfg = cfg or TriangulationConfig()
    cams = _gather_cameras(track, state, rig)
    if len(cams) < 2:
        raise InsufficientBaseline("need at least two observing cameras")
    has_stereo = any(o.right_uv is not None for o in track.observations)
    if not has_stereo:
        centers = np.array([pose.position for pose, _ in cams])
        spread = np.max(np.linalg.norm(centers[:, None] - centers[None, :], axis=-1))
        if spread < cfg.min_baseline:
            raise InsufficientBaseline(f"max baseline {spread:.4g} < {cfg.min_baseline}")

    p_init = _linear_triangulate(cams)

    # Anchor at the first observing camera; parameters are (alpha, beta, rho)
    # with the point at [alpha, beta, 1] / rho in the anchor frame.
    anchor_pose = cams[0][0]
    p_a = anchor_pose.transform(p_init)
    if p_a[2] <= 0.0:
        raise NegativeDepth("linear initialization lands behind the anchor camera")
    theta = np.array([p_a[0] / p_a[2], p_a[1] / p_a[2], 1.0 / p_a[2]])

    C_a = anchor_pose.rotation.rotation_matrix()
    t_a = anchor_pose.position
    n_cams = len(cams)
    R_rel = np.empty((n_cams, 3, 3))
    b_vec = np.empty((n_cams, 3))
    uv_obs = np.empty((n_cams, 2))
    for i, (pose, uv) in enumerate(cams):
        C_i = pose.rotation.rotation_matrix()
        R_rel[i] = C_i @ C_a.T
        b_vec[i] = C_i @ (t_a - pose.position)
        uv_obs[i] = uv

    def predict(th):
        # h_i = R_rel_i [alpha, beta, 1]^T + rho * b_i for every camera.
        return R_rel[:, :, 0] * th[0] + R_rel[:, :, 1] * th[1] + R_rel[:, :, 2] \
            + th[2] * b_vec

    for _ in range(cfg.max_iterations):
        h = predict(theta)
        if np.any(h[:, 2] <= 1e-9):
            raise DivergedTriangulation("iterate moved behind a camera")
        inv_z = 1.0 / h[:, 2]
        pred = h[:, :2] * inv_z[:, None]
        r = (pred - uv_obs).ravel()
        # d(pred)/dh applied to each parameter direction, all cameras at once.
        J = np.empty((n_cams, 2, 3))
        for j, col in enumerate((R_rel[:, :, 0], R_rel[:, :, 1], b_vec)):
            J[:, :, j] = (col[:, :2] - pred * col[:, 2:3]) * inv_z[:, None]
        step, *_ = np.linalg.lstsq(J.reshape(2 * n_cams, 3), -r, rcond=None)
        theta = theta + step
        if np.linalg.norm(step) < cfg.step_tolerance:
            break

    if theta[2] <= 0.0:
        raise NegativeDepth(f"inverse depth {theta[2]:.4g} after refinement")

    h = predict(theta)
    if np.any(h[:, 2] <= 0.0):
        raise NegativeDepth("refined point behind an observing camera")
    residuals = np.linalg.norm(h[:, :2] / h[:, 2:3] - uv_obs, axis=1)
    if float(np.mean(residuals)) > cfg.reprojection_gate:
        raise DivergedTriangulation(
            f"mean reprojection residual {np.mean(residuals):.4g} exceeds gate")

    p_anchor = np.array([theta[0], theta[1], 1.0]) / theta[2]
    return anchor_pose.untransform(p_anchor)


def point_residual_jacobian(track: PointTrack, feature_pos, state: FilterState,
                            rig: StereoRig, z_min: float = Z_MIN):
    """Residual and Jacobians of the stacked stereo reprojection error.

    Per stereo frame the residual contributes 4 rows (2 if the right view is
    missing).  Rows whose predicted point falls behind a camera are dropped;
    the whole block is rejected if more than half the rows drop.
    """
    p_G = np.asarray(feature_pos, dtype=float)
    dim = state.err_dim()
    rows_r, rows_HX, rows_Hf = [], [], []
    total_rows = 0
    dropped = 0

    for obs in track.observations:
        idx = state.clone_index(obs.frame_id)
        clone = state.clones[idx]
        s = state.clone_slice(idx)
        C1 = clone.pose.rotation.rotation_matrix()
        p_c1 = C1 @ (p_G - clone.pose.position)

        total_rows += 2
        if p_c1[2] <= z_min:
            dropped += 2
        else:
            Jp = projection_jacobian(p_c1)
            r = obs.left_uv - p_c1[:2] / p_c1[2]
            HX = np.zeros((2, dim))
            HX[:, s.start:s.start + 3] = Jp @ skew(p_c1)
            HX[:, s.start + 3:s.stop] = -Jp @ C1
            rows_r.append(r)
            rows_HX.append(HX)
            rows_Hf.append(Jp @ C1)

        if obs.right_uv is not None:
            total_rows += 2
            C_lr = rig.rotation_lr.rotation_matrix()
            p_c2 = C_lr @ (p_c1 - rig.baseline)
            if p_c2[2] <= z_min:
                dropped += 2
            else:
                Jp2 = projection_jacobian(p_c2)
                r2 = obs.right_uv - p_c2[:2] / p_c2[2]
                HX2 = np.zeros((2, dim))
                HX2[:, s.start:s.start + 3] = Jp2 @ C_lr @ skew(p_c1)
                HX2[:, s.start + 3:s.stop] = -Jp2 @ C_lr @ C1
                rows_r.append(r2)
                rows_HX.append(HX2)
                rows_Hf.append(Jp2 @ C_lr @ C1)

    if dropped * 2 > total_rows:
        raise BehindCamera(
            f"{dropped}/{total_rows} rows dropped; block rejected")
    if not rows_r:
        raise BehindCamera("no usable rows")

    r = np.concatenate(rows_r)
    H_X = np.vstack(rows_HX)
    H_f = np.vstack(rows_Hf)
    return r, H_X, H_f


def marginalize_feature(r: np.ndarray, H_X: np.ndarray, H_f: np.ndarray,
                        noise_sigma: float,
                        min_rank_ratio: float = 1e-8) -> ResidualBlock:
    """Project the residual onto the left nullspace of the feature Jacobian.

    The returned block no longer involves the feature position; the projection
    basis is orthonormal so the measurement noise stays white.
    """
    m = r.shape[0]
    n_cols = H_f.shape[1]
    if m <= n_cols:
        raise RankDeficient(f"{m} rows cannot constrain past a rank-{n_cols} feature")
    U, s, _ = np.linalg.svd(H_f, full_matrices=True)
    rank = n_cols
    if s.size < n_cols or s[n_cols - 1] < min_rank_ratio * s[0]:
        raise RankDeficient("feature Jacobian is rank deficient; dropping feature")
    A = U[:, rank:]
    resid = float(np.max(np.abs(A.T @ H_f)))
    return ResidualBlock(A.T @ r, A.T @ H_X, noise_sigma,
                         nullspace_residual=resid)
