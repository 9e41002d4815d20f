"""IMU-driven state and covariance propagation.

Mean propagation integrates the standard continuous-time kinematics

    q_dot = 0.5 * Omega(w) * q        (gyro rate, bias removed)
    v_dot = C(q)^T * a + g            (specific force, bias removed)
    p_dot = v

with a joint 4th-order Runge-Kutta step; biases and extrinsics are random
walks / constants.  Each IMU sample is held constant over its interval
(zero-order hold), so within a step the inputs are constants; the RK4 kernel
also accepts callables so its convergence order can be checked directly.

The state-transition matrix Phi is obtained by integrating the variational
equation Phi_dot = F(t) Phi with the same RK4 stages, which keeps Phi
consistent with the nonlinear mean propagation to the integrator's order.

The observability-constrained (OC) fix modifies Phi and measurement matrices
by the minimum-norm correction that exactly preserves the four unobservable
directions (global yaw about gravity plus global translation), anchored at
first estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonMonotonicTime
from .geom import UnitQuaternion, omega_matrix, skew
from .state import BA, BG, ETH, P, TH, V, FilterState, ImuState, OcAnchor


@dataclass
class ImuSample:
    """One IMU reading: raw body rate (rad/s) and specific force (m/s^2)."""
    timestamp: int  # nanoseconds
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.gyro = np.asarray(self.gyro, dtype=float)
        self.accel = np.asarray(self.accel, dtype=float)


@dataclass
class NoiseParams:
    """Continuous-time IMU noise densities.

    gyro_noise_density       rad/s/sqrt(Hz)
    accel_noise_density      m/s^2/sqrt(Hz)
    gyro_bias_randomwalk     rad/s^2/sqrt(Hz)
    accel_bias_randomwalk    m/s^3/sqrt(Hz)
    """
    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2.0e-3
    gyro_bias_randomwalk: float = 1.0e-5
    accel_bias_randomwalk: float = 1.0e-4

    def __post_init__(self):
        for name in ("gyro_noise_density", "accel_noise_density",
                     "gyro_bias_randomwalk", "accel_bias_randomwalk"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")

    def continuous_cov(self) -> np.ndarray:
        """12x12 diag covariance of [n_g, n_wg, n_a, n_wa] densities squared."""
        d = np.concatenate([
            np.full(3, self.gyro_noise_density ** 2),
            np.full(3, self.gyro_bias_randomwalk ** 2),
            np.full(3, self.accel_noise_density ** 2),
            np.full(3, self.accel_bias_randomwalk ** 2),
        ])
        return np.diag(d)


def _rotmat_of_raw_quat(q_raw: np.ndarray) -> np.ndarray:
    x, y, z, w = q_raw / np.linalg.norm(q_raw)
    d = 2.0 * w * w - 1.0
    return np.array([
        [d + 2 * x * x, 2 * (x * y + w * z), 2 * (x * z - w * y)],
        [2 * (x * y - w * z), d + 2 * y * y, 2 * (y * z + w * x)],
        [2 * (x * z + w * y), 2 * (y * z - w * x), d + 2 * z * z],
    ])


def rk4_imu_step(q_xyzw, v, p, omega_fn, accel_fn, gravity, t0: float, dt: float):
    """One RK4 step of the IMU kinematics with time-varying inputs.

    omega_fn(t) and accel_fn(t) return the bias-free body rate and specific
    force.  Returns (q_xyzw normalized, v, p) at t0 + dt.
    """
    def deriv(t, q, vv):
        w = omega_fn(t)
        a = accel_fn(t)
        q_dot = 0.5 * omega_matrix(w) @ q
        v_dot = _rotmat_of_raw_quat(q).T @ a + gravity
        p_dot = vv
        return q_dot, v_dot, p_dot

    q0 = np.asarray(q_xyzw, dtype=float)
    v0 = np.asarray(v, dtype=float)
    p0 = np.asarray(p, dtype=float)

    k1q, k1v, k1p = deriv(t0, q0, v0)
    k2q, k2v, k2p = deriv(t0 + 0.5 * dt, q0 + 0.5 * dt * k1q, v0 + 0.5 * dt * k1v)
    k3q, k3v, k3p = deriv(t0 + 0.5 * dt, q0 + 0.5 * dt * k2q, v0 + 0.5 * dt * k2v)
    k4q, k4v, k4p = deriv(t0 + dt, q0 + dt * k3q, v0 + dt * k3v)

    q1 = q0 + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    v1 = v0 + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    p1 = p0 + dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
    return q1 / np.linalg.norm(q1), v1, p1


def _error_dynamics_F(R_gb: np.ndarray, omega_hat, accel_hat, dim: int) -> np.ndarray:
    """Continuous error-state dynamics matrix; extrinsic rows stay zero."""
    F = np.zeros((dim, dim))
    F[TH, TH] = -skew(omega_hat)
    F[TH, BG] = -np.eye(3)
    F[V, TH] = -R_gb.T @ skew(accel_hat)
    F[V, BA] = -R_gb.T
    F[P, V] = np.eye(3)
    return F


def _noise_input_G(R_gb: np.ndarray, dim: int) -> np.ndarray:
    G = np.zeros((dim, 12))
    G[TH, 0:3] = -np.eye(3)
    G[BG, 3:6] = np.eye(3)
    G[V, 6:9] = -R_gb.T
    G[BA, 9:12] = np.eye(3)
    return G


def _quat_zoh(q: UnitQuaternion, omega_hat, dt: float) -> np.ndarray:
    """Closed-form quaternion after rotating at constant rate for dt."""
    w = np.asarray(omega_hat, dtype=float)
    n = np.linalg.norm(w)
    if n * dt < 1e-12:
        step = np.eye(4) + 0.5 * dt * omega_matrix(w)
    else:
        half = 0.5 * n * dt
        step = np.cos(half) * np.eye(4) + np.sin(half) / n * omega_matrix(w)
    q1 = step @ q.xyzw
    return q1 / np.linalg.norm(q1)


def state_transition(imu: ImuState, sample: ImuSample, dt: float,
                     include_extrinsics: bool = False) -> np.ndarray:
    """Discrete error-state transition Phi over one zero-order-hold step.

    Integrates Phi_dot = F(t) Phi with RK4; F is evaluated on the nominal
    attitude at the stage times, so Phi matches finite differences of the
    nonlinear propagation to the integrator's order.
    """
    if dt <= 0.0:
        raise NonMonotonicTime(f"dt must be positive, got {dt}")
    dim = 21 if include_extrinsics else 15
    omega_hat = sample.gyro - imu.bg
    accel_hat = sample.accel - imu.ba

    q0 = imu.q_GB
    R0 = q0.rotation_matrix()
    R_half = _rotmat_of_raw_quat(_quat_zoh(q0, omega_hat, 0.5 * dt))
    R_full = _rotmat_of_raw_quat(_quat_zoh(q0, omega_hat, dt))

    F0 = _error_dynamics_F(R0, omega_hat, accel_hat, dim)
    F_half = _error_dynamics_F(R_half, omega_hat, accel_hat, dim)
    F_full = _error_dynamics_F(R_full, omega_hat, accel_hat, dim)

    Phi0 = np.eye(dim)
    k1 = F0 @ Phi0
    k2 = F_half @ (Phi0 + 0.5 * dt * k1)
    k3 = F_half @ (Phi0 + 0.5 * dt * k2)
    k4 = F_full @ (Phi0 + dt * k3)
    return Phi0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discrete_noise_cov(imu_before: ImuState, imu_after: ImuState, phi: np.ndarray,
                       noise: NoiseParams, dt: float) -> np.ndarray:
    """Trapezoidal discretization of the propagated process noise."""
    dim = phi.shape[0]
    Qc = noise.continuous_cov()
    G0 = _noise_input_G(imu_before.q_GB.rotation_matrix(), dim)
    G1 = _noise_input_G(imu_after.q_GB.rotation_matrix(), dim)
    start = phi @ G0 @ Qc @ G0.T @ phi.T
    end = G1 @ Qc @ G1.T
    return 0.5 * dt * (start + end)


def imu_unobservable_basis(q_GB: UnitQuaternion, v_GB, p_GB, gravity,
                           dim: int = 15) -> np.ndarray:
    """Unobservable directions of the IMU error block.

    Column 0 is a global rotation about gravity (yaw), columns 1..3 are global
    translation.  Evaluate at first-estimate (anchor) values.
    """
    N = np.zeros((dim, 4))
    N[TH, 0] = q_GB.rotation_matrix() @ gravity
    N[V, 0] = -skew(v_GB) @ gravity
    N[P, 0] = -skew(p_GB) @ gravity
    N[P, 1:4] = np.eye(3)
    return N


def full_unobservable_basis(state: FilterState) -> np.ndarray:
    """Stacked unobservable basis over IMU block and all clones, built from
    the stored first-estimate anchors."""
    dim = state.err_dim()
    N = np.zeros((dim, 4))
    imu_dim = state.imu_err_dim()
    a = state.oc_anchor
    N[:imu_dim, :] = imu_unobservable_basis(a.q_GB, a.v_GB, a.p_GB,
                                            state.gravity, dim=imu_dim)
    for i, clone in enumerate(state.clones):
        s = state.clone_slice(i)
        anchor = clone.anchor_pose
        N[s.start:s.start + 3, 0] = anchor.rotation.rotation_matrix() @ state.gravity
        N[s.start + 3:s.stop, 0] = -skew(anchor.position) @ state.gravity
        N[s.start + 3:s.stop, 1:4] = np.eye(3)
    return N


def oc_fix(phi: np.ndarray | None = None, H: np.ndarray | None = None,
           nullspace: np.ndarray | None = None,
           nullspace_next: np.ndarray | None = None):
    """Minimum-norm modification enforcing the observability constraints.

    For the transition matrix: phi* @ nullspace == nullspace_next.
    For a measurement matrix:  H* @ nullspace == 0.
    Either input may be None; the corresponding output is None.
    Returns (phi_star, H_star).
    """
    if nullspace is None:
        raise ValueError("nullspace basis required")
    N = nullspace
    # Min-Frobenius-norm row corrections: X* = X - (X N - target) (N^T N)^-1 N^T
    NtN_inv_Nt = np.linalg.solve(N.T @ N, N.T)

    phi_star = None
    if phi is not None:
        if nullspace_next is None:
            raise ValueError("nullspace_next required to fix phi")
        resid = phi @ N - nullspace_next
        phi_star = phi - resid @ NtN_inv_Nt

    H_star = None
    if H is not None:
        H_star = H - (H @ N) @ NtN_inv_Nt
    return phi_star, H_star


def propagate(state: FilterState, sample: ImuSample, dt: float,
              noise: NoiseParams, enable_oc: bool = True) -> FilterState:
    """Propagate mean and covariance through one IMU interval.

    Biases are subtracted internally; clone cross-covariance is multiplied by
    Phi on the IMU side only.  With enable_oc, Phi receives the
    observability-constrained minimum-norm fix before touching the covariance,
    and the first-estimate anchors advance to the propagated state.
    """
    if dt <= 0.0:
        raise NonMonotonicTime(f"dt must be positive, got {dt}")
    imu = state.imu
    omega_hat = sample.gyro - imu.bg
    accel_hat = sample.accel - imu.ba

    imu_before = imu.copy()
    phi = state_transition(imu, sample, dt,
                           include_extrinsics=state.estimate_extrinsics)

    q1, v1, p1 = rk4_imu_step(imu.q_GB.xyzw, imu.v_GB, imu.p_GB,
                              lambda t: omega_hat, lambda t: accel_hat,
                              state.gravity, 0.0, dt)
    imu.q_GB = UnitQuaternion.from_xyzw(q1)
    imu.v_GB = v1
    imu.p_GB = p1

    dim = state.imu_err_dim()
    if enable_oc:
        a = state.oc_anchor
        N_k = imu_unobservable_basis(a.q_GB, a.v_GB, a.p_GB, state.gravity, dim)
        N_k1 = imu_unobservable_basis(imu.q_GB, imu.v_GB, imu.p_GB,
                                      state.gravity, dim)
        phi, _ = oc_fix(phi=phi, nullspace=N_k, nullspace_next=N_k1)
    state.oc_anchor = OcAnchor(imu.q_GB, imu.v_GB, imu.p_GB)
    state.last_phi = phi  # applied transition, for diagnostics and tests

    Q = discrete_noise_cov(imu_before, imu, phi, noise, dt)
    P_mat = state.cov
    P_mat[:dim, :dim] = phi @ P_mat[:dim, :dim] @ phi.T + Q
    if state.err_dim() > dim:
        P_mat[:dim, dim:] = phi @ P_mat[:dim, dim:]
        P_mat[dim:, :dim] = P_mat[:dim, dim:].T
    state.symmetrize()
    return state
