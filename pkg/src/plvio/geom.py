"""Quaternion, rotation, and pose algebra shared by every other module.

Conventions (locked by the round-trip tests in tests/test_geom.py):

* Quaternions are stored scalar-last, ``[x, y, z, w]``, unit norm, with the
  canonical sign ``w >= 0``.
* A state quaternion ``q_GB`` represents the rotation from the global frame
  {G} to the body frame {B}; its matrix ``rotation_matrix(q_GB)`` maps
  global-frame vectors into body-frame coordinates, ``v_B = C(q_GB) v_G``.
* Composition is defined so that ``C(a * b) = C(a) C(b)``.  With global->frame
  semantics the chain reads right to left: ``q_GC = q_BC * q_GB``.
* The error quaternion is the first-order form ``dq = normalize([dtheta/2, 1])``
  applied from the left, ``q = dq * q_hat``, so ``C(q) ~ (I - [dtheta x]) C(q_hat)``.
* The angular-rate matrix ``omega_matrix(w)`` follows the block layout
  ``[[-[w x], w], [-w^T, 0]]`` and satisfies ``omega_matrix(w) @ q == (w, 0) * q``,
  which makes ``q_dot = 0.5 * Omega(w) * q`` the kinematics of ``q_GB`` under
  body rate ``w``.

All types are immutable values; operations return new objects.
"""

from __future__ import annotations

import math

import numpy as np


def skew(v) -> np.ndarray:
    """3x3 matrix [v x] with skew(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def omega_matrix(w) -> np.ndarray:
    """4x4 angular-rate matrix: top-left -[w x], top-right w, bottom row (-w^T, 0)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros((4, 4))
    out[:3, :3] = -skew(w)
    out[:3, 3] = w
    out[3, :3] = -w
    return out


class UnitQuaternion:
    """Unit quaternion, scalar-last storage, canonical sign w >= 0."""

    __slots__ = ("_q", "_R")

    def __init__(self, x, y, z, w):
        q = np.array([x, y, z, w], dtype=float)
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ValueError("quaternion norm too small to normalize")
        q /= n
        if q[3] < 0.0:
            q = -q
        self._q = q
        self._q.flags.writeable = False
        self._R = None

    # -- constructors -------------------------------------------------------

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(0.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_xyzw(cls, arr) -> "UnitQuaternion":
        a = np.asarray(arr, dtype=float)
        return cls(a[0], a[1], a[2], a[3])

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "UnitQuaternion":
        """Quaternion whose matrix maps global coords into a frame rotated by
        +angle about axis (i.e. the passive DCM of that rotation)."""
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            return cls.identity()
        half = 0.5 * angle
        v = axis / n * math.sin(half)
        return cls(v[0], v[1], v[2], math.cos(half))

    @classmethod
    def from_rotation_matrix(cls, R) -> "UnitQuaternion":
        """Inverse of rotation_matrix(); Shepperd's method for stability."""
        R = np.asarray(R, dtype=float)
        tr = np.trace(R)
        # Work in components of the matrix convention used by rotation_matrix.
        if tr > 0.0:
            w = 0.5 * math.sqrt(1.0 + tr)
            s = 0.25 / w
            x = (R[1, 2] - R[2, 1]) * s
            y = (R[2, 0] - R[0, 2]) * s
            z = (R[0, 1] - R[1, 0]) * s
        else:
            i = int(np.argmax(np.diag(R)))
            j, k = (i + 1) % 3, (i + 2) % 3
            v_i = 0.5 * math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0))
            s = 0.25 / v_i
            v = np.empty(3)
            v[i] = v_i
            v[j] = (R[i, j] + R[j, i]) * s
            v[k] = (R[i, k] + R[k, i]) * s
            w = (R[j, k] - R[k, j]) * s
            x, y, z = v
        return cls(x, y, z, w)

    # -- accessors ----------------------------------------------------------

    @property
    def xyzw(self) -> np.ndarray:
        return self._q

    @property
    def x(self) -> float:
        return float(self._q[0])

    @property
    def y(self) -> float:
        return float(self._q[1])

    @property
    def z(self) -> float:
        return float(self._q[2])

    @property
    def w(self) -> float:
        return float(self._q[3])

    @property
    def vec(self) -> np.ndarray:
        return self._q[:3]

    # -- algebra ------------------------------------------------------------

    def multiply(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return quat_multiply(self, other)

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return quat_multiply(self, other)

    def inverse(self) -> "UnitQuaternion":
        q = self._q
        return UnitQuaternion(-q[0], -q[1], -q[2], q[3])

    def rotation_matrix(self) -> np.ndarray:
        """Matrix C(q) mapping source-frame ("from") coords to target-frame
        coords.  Cached; the quaternion is immutable."""
        if self._R is None:
            x, y, z, w = self._q
            d = 2.0 * w * w - 1.0
            R = np.array([
                [d + 2 * x * x, 2 * (x * y + w * z), 2 * (x * z - w * y)],
                [2 * (x * y - w * z), d + 2 * y * y, 2 * (y * z + w * x)],
                [2 * (x * z + w * y), 2 * (y * z - w * x), d + 2 * z * z],
            ])
            R.flags.writeable = False
            self._R = R
        return self._R

    def rotate(self, vec) -> np.ndarray:
        return self.rotation_matrix() @ np.asarray(vec, dtype=float)

    def angle(self) -> float:
        """Rotation angle in [0, pi]; atan2 form keeps precision near 0."""
        return 2.0 * math.atan2(float(np.linalg.norm(self._q[:3])), abs(self.w))

    def angle_to(self, other: "UnitQuaternion") -> float:
        return quat_multiply(self, other.inverse()).angle()

    def almost_equal(self, other: "UnitQuaternion", tol: float = 1e-9) -> bool:
        return self.angle_to(other) < tol

    def __repr__(self) -> str:
        q = self._q
        return f"UnitQuaternion(x={q[0]:.6g}, y={q[1]:.6g}, z={q[2]:.6g}, w={q[3]:.6g})"


def quat_multiply(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Compose rotations so that C(a*b) = C(a) @ C(b).

    With global->frame quaternions this is the compositional-update product:
    the error update reads q = dq * q_hat, and frame chains compose as
    q_GC = q_BC * q_GB.
    """
    av, aw = a.xyzw[:3], a.xyzw[3]
    bv, bw = b.xyzw[:3], b.xyzw[3]
    v = aw * bv + bw * av - np.cross(av, bv)
    w = aw * bw - float(np.dot(av, bv))
    return UnitQuaternion(v[0], v[1], v[2], w)


def small_angle_quat(dtheta) -> UnitQuaternion:
    """First-order error quaternion dq = normalize([dtheta/2, 1])."""
    d = np.asarray(dtheta, dtype=float)
    return UnitQuaternion(0.5 * d[0], 0.5 * d[1], 0.5 * d[2], 1.0)


class Pose:
    """Rigid transform stored as (rotation q global->frame, position in global).

    Acting on a global point: ``transform(x) = C(q) (x - p)`` yields the point
    in frame coordinates.  ``compose(a, b)`` chains transforms, apply b then a,
    so for frames it reads ``pose_GC = compose(pose_BC, pose_GB)`` where
    ``pose_BC`` carries (q_BC, ^B p_C).
    """

    __slots__ = ("rotation", "position")

    def __init__(self, rotation: UnitQuaternion, position):
        self.rotation = rotation
        self.position = np.array(position, dtype=float)
        self.position.flags.writeable = False

    @classmethod
    def identity(cls) -> "Pose":
        return cls(UnitQuaternion.identity(), np.zeros(3))

    def transform(self, x_global) -> np.ndarray:
        """Global point -> frame coordinates."""
        return self.rotation.rotation_matrix() @ (np.asarray(x_global, dtype=float) - self.position)

    def untransform(self, x_local) -> np.ndarray:
        """Frame coordinates -> global point."""
        return self.rotation.rotation_matrix().T @ np.asarray(x_local, dtype=float) + self.position

    def compose(self, other: "Pose") -> "Pose":
        """Transform equal to applying `other` first, then `self`."""
        q = quat_multiply(self.rotation, other.rotation)
        p = other.position + other.rotation.rotation_matrix().T @ self.position
        return Pose(q, p)

    def inverse(self) -> "Pose":
        q_inv = self.rotation.inverse()
        return Pose(q_inv, -self.rotation.rotation_matrix() @ self.position)

    def distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.position - other.position))

    def angle_to(self, other: "Pose") -> float:
        return self.rotation.angle_to(other.rotation)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return self.distance_to(other) < tol and self.angle_to(other) < tol

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation!r}, position={self.position})"
