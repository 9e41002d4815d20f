"""Filter state: evolving IMU state, camera-pose clones, joint covariance.

Error-state layout (columns of the covariance), all blocks 3-wide:

    [dtheta, dbg, dv, dba, dp]                  IMU, 15 states
    [dtheta_e, dp_e]                            IMU-camera extrinsics, only
                                                when estimate_extrinsics is on
    [dtheta_c, dp_c] per clone                  clones in timestamp order

Orientation errors are compositional (q = dq * q_hat, see geom), everything
else is additive.  The covariance is re-symmetrized after every mutation.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, WindowFull
from .geom import Pose, UnitQuaternion, quat_multiply, skew, small_angle_quat

# Block slices within the IMU part of the error state.
TH = slice(0, 3)     # orientation
BG = slice(3, 6)     # gyro bias
V = slice(6, 9)      # velocity
BA = slice(9, 12)    # accel bias
P = slice(12, 15)    # position
ETH = slice(15, 18)  # extrinsic orientation (optional)
EP = slice(18, 21)   # extrinsic translation (optional)

IMU_ERR_DIM = 15
IMU_ERR_DIM_WITH_EXTRINSICS = 21
CLONE_ERR_DIM = 6

GRAVITY = np.array([0.0, 0.0, -9.81])


class ImuExtrinsics:
    """IMU-camera calibration: q_CB (camera->body rotation) and ^B p_C."""

    __slots__ = ("q_CB", "p_BC")

    def __init__(self, q_CB: UnitQuaternion | None = None, p_BC=None):
        self.q_CB = q_CB if q_CB is not None else UnitQuaternion.identity()
        self.p_BC = np.array(p_BC, dtype=float) if p_BC is not None else np.zeros(3)

    def body_to_camera(self) -> Pose:
        """Pose carrying (q_BC, ^B p_C) so that compose(this, pose_GB) = pose_GC."""
        return Pose(self.q_CB.inverse(), self.p_BC)

    def copy(self) -> "ImuExtrinsics":
        return ImuExtrinsics(self.q_CB, self.p_BC.copy())


class ImuState:
    """Evolving IMU state: q_GB, gyro bias, velocity, accel bias, position."""

    __slots__ = ("q_GB", "bg", "v_GB", "ba", "p_GB", "extrinsics")

    def __init__(self, q_GB=None, bg=None, v_GB=None, ba=None, p_GB=None,
                 extrinsics: ImuExtrinsics | None = None):
        self.q_GB = q_GB if q_GB is not None else UnitQuaternion.identity()
        self.bg = np.array(bg, dtype=float) if bg is not None else np.zeros(3)
        self.v_GB = np.array(v_GB, dtype=float) if v_GB is not None else np.zeros(3)
        self.ba = np.array(ba, dtype=float) if ba is not None else np.zeros(3)
        self.p_GB = np.array(p_GB, dtype=float) if p_GB is not None else np.zeros(3)
        self.extrinsics = extrinsics if extrinsics is not None else ImuExtrinsics()

    def pose(self) -> Pose:
        return Pose(self.q_GB, self.p_GB)

    def camera_pose(self) -> Pose:
        """Left-camera pose implied by the current IMU pose and extrinsics."""
        return self.extrinsics.body_to_camera().compose(self.pose())

    def copy(self) -> "ImuState":
        return ImuState(self.q_GB, self.bg.copy(), self.v_GB.copy(), self.ba.copy(),
                        self.p_GB.copy(), self.extrinsics.copy())


class CameraClone:
    """Stochastic copy of the camera pose at one image timestamp."""

    __slots__ = ("pose", "timestamp", "frame_id", "anchor_pose")

    def __init__(self, pose: Pose, timestamp: int, frame_id: int,
                 anchor_pose: Pose | None = None):
        self.pose = pose
        self.timestamp = int(timestamp)
        self.frame_id = int(frame_id)
        # First-estimate pose used to build unobservable directions; fixed at
        # augmentation, never touched by updates.
        self.anchor_pose = anchor_pose if anchor_pose is not None else pose

    def copy(self) -> "CameraClone":
        return CameraClone(self.pose, self.timestamp, self.frame_id, self.anchor_pose)


class OcAnchor:
    """First-estimate IMU quantities for the observability-constrained fix."""

    __slots__ = ("q_GB", "v_GB", "p_GB")

    def __init__(self, q_GB: UnitQuaternion, v_GB, p_GB):
        self.q_GB = q_GB
        self.v_GB = np.array(v_GB, dtype=float)
        self.p_GB = np.array(p_GB, dtype=float)

    def copy(self) -> "OcAnchor":
        return OcAnchor(self.q_GB, self.v_GB.copy(), self.p_GB.copy())


class FilterState:
    """Full estimator state: IMU state, clone window, joint covariance.

    Owned by a single estimation thread; use copy() to hand read-only
    snapshots to other threads.
    """

    def __init__(self, imu: ImuState | None = None, gravity=None,
                 estimate_extrinsics: bool = False, max_clones: int = 20,
                 cov: np.ndarray | None = None):
        self.imu = imu if imu is not None else ImuState()
        self.gravity = np.array(gravity, dtype=float) if gravity is not None else GRAVITY.copy()
        self.estimate_extrinsics = bool(estimate_extrinsics)
        self.max_clones = int(max_clones)
        self.clones: list[CameraClone] = []
        dim = self.imu_err_dim()
        if cov is None:
            cov = np.zeros((dim, dim))
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (dim, dim):
            raise DimensionMismatch(f"initial covariance must be {dim}x{dim}")
        self.cov = cov.copy()
        self.oc_anchor = OcAnchor(self.imu.q_GB, self.imu.v_GB, self.imu.p_GB)

    # -- layout -------------------------------------------------------------

    def imu_err_dim(self) -> int:
        return IMU_ERR_DIM_WITH_EXTRINSICS if self.estimate_extrinsics else IMU_ERR_DIM

    def err_dim(self) -> int:
        return self.imu_err_dim() + CLONE_ERR_DIM * len(self.clones)

    def clone_slice(self, index: int) -> slice:
        start = self.imu_err_dim() + CLONE_ERR_DIM * index
        return slice(start, start + CLONE_ERR_DIM)

    def clone_index(self, frame_id: int) -> int:
        for i, c in enumerate(self.clones):
            if c.frame_id == frame_id:
                return i
        raise KeyError(f"no clone with frame_id {frame_id}")

    def clone_by_frame(self, frame_id: int) -> CameraClone:
        return self.clones[self.clone_index(frame_id)]

    # -- housekeeping ---------------------------------------------------------

    def symmetrize(self) -> None:
        self.cov = 0.5 * (self.cov + self.cov.T)

    def copy(self) -> "FilterState":
        out = FilterState(self.imu.copy(), self.gravity.copy(),
                          self.estimate_extrinsics, self.max_clones)
        out.clones = [c.copy() for c in self.clones]
        out.cov = self.cov.copy()
        out.oc_anchor = self.oc_anchor.copy()
        return out


def clone_jacobian(state: FilterState) -> np.ndarray:
    """Jacobian of the (to-be-cloned) camera pose error w.r.t. the current
    error state; 6 x err_dim, clone columns zero."""
    imu = state.imu
    R_gb = imu.q_GB.rotation_matrix()          # global -> body
    R_bc = imu.extrinsics.q_CB.rotation_matrix().T  # body -> camera
    J = np.zeros((CLONE_ERR_DIM, state.err_dim()))
    J[0:3, TH] = R_bc
    J[3:6, TH] = -R_gb.T @ skew(imu.extrinsics.p_BC)
    J[3:6, P] = np.eye(3)
    if state.estimate_extrinsics:
        J[0:3, ETH] = -R_bc
        J[3:6, EP] = R_gb.T
    return J


def augment_clone(state: FilterState, timestamp: int, frame_id: int) -> FilterState:
    """Append a clone of the current camera pose and grow the covariance.

    The new rows/columns are the exact Jacobian of the clone pose with respect
    to the current error state, so cross-covariances stay consistent.
    """
    if len(state.clones) >= state.max_clones:
        raise WindowFull(f"window already holds {state.max_clones} clones")
    if state.clones and timestamp <= state.clones[-1].timestamp:
        raise DimensionMismatch("clone timestamps must be strictly increasing")
    if any(c.frame_id == frame_id for c in state.clones):
        raise DimensionMismatch(f"frame_id {frame_id} already cloned")

    cam_pose = state.imu.camera_pose()
    dim = state.err_dim()
    J = clone_jacobian(state)

    P_old = state.cov
    new_cov = np.zeros((dim + CLONE_ERR_DIM, dim + CLONE_ERR_DIM))
    new_cov[:dim, :dim] = P_old
    cross = J @ P_old
    new_cov[dim:, :dim] = cross
    new_cov[:dim, dim:] = cross.T
    new_cov[dim:, dim:] = J @ P_old @ J.T

    state.clones.append(CameraClone(cam_pose, timestamp, frame_id))
    state.cov = new_cov
    state.symmetrize()
    return state


def prune_clones(state: FilterState, policy: str = "evenly_spaced",
                 count: int | None = None):
    """Marginalize clones out of the window.

    evenly_spaced: drop every other clone among the oldest half (keeps
    temporal spread for triangulation baselines).  oldest_first: drop the
    `count` oldest (default 1).  Returns (state, removed clones).
    """
    n = len(state.clones)
    if n == 0:
        return state, []
    if policy == "oldest_first":
        k = 1 if count is None else min(count, n)
        indices = list(range(k))
    elif policy == "evenly_spaced":
        half = max(1, n // 2)
        indices = list(range(0, half, 2))
        if count is not None:
            indices = indices[:count]
    else:
        raise ValueError(f"unknown prune policy {policy!r}")

    removed = [state.clones[i] for i in indices]
    keep_mask = np.ones(state.err_dim(), dtype=bool)
    for i in indices:
        keep_mask[state.clone_slice(i)] = False
    state.cov = state.cov[np.ix_(keep_mask, keep_mask)]
    state.clones = [c for i, c in enumerate(state.clones) if i not in set(indices)]
    state.symmetrize()
    return state, removed


def inject_error(state: FilterState, dx: np.ndarray) -> FilterState:
    """Apply an error-state correction: compositional for orientations,
    additive for everything else."""
    dx = np.asarray(dx, dtype=float)
    if dx.shape != (state.err_dim(),):
        raise DimensionMismatch(
            f"correction has dim {dx.shape}, state expects {state.err_dim()}")

    imu = state.imu
    imu.q_GB = quat_multiply(small_angle_quat(dx[TH]), imu.q_GB)
    imu.bg = imu.bg + dx[BG]
    imu.v_GB = imu.v_GB + dx[V]
    imu.ba = imu.ba + dx[BA]
    imu.p_GB = imu.p_GB + dx[P]
    if state.estimate_extrinsics:
        imu.extrinsics.q_CB = quat_multiply(small_angle_quat(dx[ETH]), imu.extrinsics.q_CB)
        imu.extrinsics.p_BC = imu.extrinsics.p_BC + dx[EP]

    for i, clone in enumerate(state.clones):
        s = state.clone_slice(i)
        dth = dx[s][:3]
        dp = dx[s][3:]
        clone.pose = Pose(quat_multiply(small_angle_quat(dth), clone.pose.rotation),
                          clone.pose.position + dp)
    return state


def pose_error(estimate: Pose, reference: Pose) -> np.ndarray:
    """6-vector [dtheta, dp] such that inject of (dtheta, dp) moves reference
    onto estimate, to first order (the inverse of the compositional update)."""
    dq = quat_multiply(estimate.rotation, reference.rotation.inverse())
    dtheta = 2.0 * dq.vec / dq.w
    return np.concatenate([dtheta, estimate.position - reference.position])
