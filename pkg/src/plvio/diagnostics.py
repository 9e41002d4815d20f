"""Finite-difference verification suites for every analytic Jacobian.

Each suite draws random configurations, compares the analytic matrix against
central finite differences of the corresponding nonlinear function, and
reports the worst relative error.  Used by the check-jacobians CLI command
and by the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from .geom import Pose, UnitQuaternion, quat_multiply, small_angle_quat
from .line_meas import LineMeas, LineObservation, line_jacobians, line_residual
from .point_meas import (
    PointTrack,
    StereoObservation,
    StereoRig,
    pinhole_project,
    point_residual_jacobian,
)
from .propagation import ImuSample, rk4_imu_step, state_transition
from .state import CameraClone, FilterState, ImuState, augment_clone, inject_error

_GRAVITY = np.array([0.0, 0.0, -9.81])


def _numeric_jacobian(f, x0, eps=1e-6):
    f0 = np.asarray(f(x0), dtype=float)
    J = np.zeros((f0.size, x0.size))
    for i in range(x0.size):
        dx = np.zeros_like(x0)
        dx[i] = eps
        J[:, i] = (np.asarray(f(x0 + dx)) - np.asarray(f(x0 - dx))) / (2 * eps)
    return J


def _rel(a, b):
    scale = max(1.0, float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def _random_window(rng, n_frames=3):
    st = FilterState(ImuState(), max_clones=20)
    for k in range(n_frames):
        q = UnitQuaternion.from_axis_angle(rng.normal(size=3), 0.1 * rng.normal())
        st.clones.append(CameraClone(Pose(q, 0.4 * rng.normal(size=3)),
                                     k * 10 ** 8, k))
    st.cov = 1e-4 * np.eye(st.err_dim())
    return st


def _observe_point(p_G, st, rig):
    track = PointTrack(0)
    for clone in st.clones:
        left = pinhole_project(clone.pose.transform(p_G))
        right = pinhole_project(rig.right_pose(clone.pose).transform(p_G))
        track.add(StereoObservation(clone.frame_id, left, right))
    return track


def check_point_jacobians(n: int = 500, seed: int = 0) -> float:
    """Worst relative FD error over H_f and H_X of the point model."""
    rng = np.random.default_rng(seed)
    rig = StereoRig()
    worst = 0.0
    for _ in range(n):
        st = _random_window(rng)
        p_true = np.array([0.4, -0.2, 5.0]) + 0.6 * rng.normal(size=3)
        track = _observe_point(p_true, st, rig)
        p_lin = p_true + 0.02 * rng.normal(size=3)
        _, H_X, H_f = point_residual_jacobian(track, p_lin, st, rig)

        J_f = _numeric_jacobian(
            lambda p: point_residual_jacobian(track, p, st, rig)[0], p_lin)
        worst = max(worst, _rel(J_f, -H_f))

        def res_state(dx):
            pert = st.copy()
            inject_error(pert, dx)
            return point_residual_jacobian(track, p_lin, pert, rig)[0]

        J_x = _numeric_jacobian(res_state, np.zeros(st.err_dim()))
        worst = max(worst, _rel(J_x, -H_X))
    return worst


def check_line_jacobians(n: int = 500, seed: int = 1) -> float:
    """Worst relative FD error over H_l and H_X of the line model."""
    rng = np.random.default_rng(seed)
    rig = StereoRig()
    worst = 0.0
    for _ in range(n):
        st = _random_window(rng, n_frames=2)
        center = np.array([0.0, 0.0, 4.5]) + rng.normal(size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        p_b, p_e = center - 0.5 * d, center + 0.5 * d
        clone = st.clones[-1]
        idx = len(st.clones) - 1

        def project_meas(pose):
            e1 = pinhole_project(pose.transform(p_b))
            e2 = pinhole_project(pose.transform(p_e))
            t = (e2 - e1) / np.linalg.norm(e2 - e1)
            return LineMeas(0.5 * (e1 + e2), np.array([-t[1], t[0]]),
                            np.vstack([e1, e2]))

        obs = LineObservation(clone.frame_id, project_meas(clone.pose),
                              project_meas(rig.right_pose(clone.pose)))
        lin = (p_b + 0.02 * rng.normal(size=3), p_e + 0.02 * rng.normal(size=3))
        H_X, H_l = line_jacobians(obs, lin, st, idx, rig)

        J_l = _numeric_jacobian(
            lambda x: line_residual(obs, (x[:3], x[3:]), clone.pose, rig),
            np.concatenate(lin))
        worst = max(worst, _rel(J_l, -H_l))

        def res_state(dx):
            pert = st.copy()
            inject_error(pert, dx)
            return line_residual(obs, lin, pert.clones[idx].pose, rig)

        J_x = _numeric_jacobian(res_state, np.zeros(st.err_dim()))
        worst = max(worst, _rel(J_x, -H_X))
    return worst


def check_augmentation_jacobian(n: int = 500, seed: int = 2) -> float:
    """Worst relative FD error of the clone-augmentation Jacobian."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        imu = ImuState(q_GB=UnitQuaternion.from_xyzw(rng.normal(size=4)),
                       v_GB=rng.normal(size=3), p_GB=rng.normal(size=3))
        from .state import ImuExtrinsics
        imu.extrinsics = ImuExtrinsics(
            UnitQuaternion.from_xyzw(rng.normal(size=4)), 0.1 * rng.normal(size=3))
        st = FilterState(imu)
        dim = st.imu_err_dim()
        A = rng.normal(size=(dim, dim))
        st.cov = A @ A.T / dim + 1e-6 * np.eye(dim)

        def clone_err(dx):
            pert = st.copy()
            inject_error(pert, dx)
            ref = st.imu.camera_pose()
            cur = pert.imu.camera_pose()
            dq = quat_multiply(cur.rotation, ref.rotation.inverse())
            return np.concatenate([2 * dq.vec / dq.w, cur.position - ref.position])

        J_fd = _numeric_jacobian(clone_err, np.zeros(dim))
        st2 = st.copy()
        augment_clone(st2, 1, 0)
        J = st2.cov[dim:, :dim] @ np.linalg.inv(st.cov)
        worst = max(worst, _rel(J, J_fd))
    return worst


def check_state_transition(n: int = 500, seed: int = 3, dt: float = 0.005) -> float:
    """Worst relative FD error of the discrete state-transition matrix."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        imu = ImuState(q_GB=UnitQuaternion.from_xyzw(rng.normal(size=4)),
                       bg=0.01 * rng.normal(size=3), v_GB=rng.normal(size=3),
                       ba=0.05 * rng.normal(size=3), p_GB=rng.normal(size=3))
        sample = ImuSample(0, 0.6 * rng.normal(size=3), 2.5 * rng.normal(size=3))
        phi = state_transition(imu, sample, dt)

        def flow(x: ImuState) -> ImuState:
            q1, v1, p1 = rk4_imu_step(x.q_GB.xyzw, x.v_GB, x.p_GB,
                                      lambda t: sample.gyro - x.bg,
                                      lambda t: sample.accel - x.ba,
                                      _GRAVITY, 0.0, dt)
            out = x.copy()
            out.q_GB = UnitQuaternion.from_xyzw(q1)
            out.v_GB, out.p_GB = v1, p1
            return out

        nominal = flow(imu)

        def err_of(pert: ImuState, ref: ImuState):
            dq = quat_multiply(pert.q_GB, ref.q_GB.inverse())
            return np.concatenate([2 * dq.vec / dq.w, pert.bg - ref.bg,
                                   pert.v_GB - ref.v_GB, pert.ba - ref.ba,
                                   pert.p_GB - ref.p_GB])

        def flow_err(dx):
            pert = imu.copy()
            pert.q_GB = quat_multiply(small_angle_quat(dx[0:3]), pert.q_GB)
            pert.bg = pert.bg + dx[3:6]
            pert.v_GB = pert.v_GB + dx[6:9]
            pert.ba = pert.ba + dx[9:12]
            pert.p_GB = pert.p_GB + dx[12:15]
            return err_of(flow(pert), nominal)

        J_fd = _numeric_jacobian(flow_err, np.zeros(15))
        worst = max(worst, _rel(J_fd, phi))
    return worst


SUITES = {
    "point_H_X_H_f": check_point_jacobians,
    "line_H_X_H_l": check_line_jacobians,
    "clone_augmentation": check_augmentation_jacobian,
    "state_transition_phi": check_state_transition,
}


def run_all(n: int = 500, tolerance: float = 1e-5) -> dict:
    """Run every suite; returns {name: (worst_rel_error, passed)}."""
    out = {}
    for name, fn in SUITES.items():
        err = fn(n)
        out[name] = (err, err < tolerance)
    return out
