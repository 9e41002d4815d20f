import math

import numpy as np
import pytest

from plvio.geom import Pose, UnitQuaternion, omega_matrix, quat_multiply, skew, small_angle_quat

from _oracles import (
    exp_map_xyzw,
    integrate_quat_constant_rate,
    numeric_jacobian,
    quat_angle,
)


def random_quat(rng):
    q = rng.normal(size=4)
    return UnitQuaternion.from_xyzw(q)


class TestUnitQuaternion:
    def test_normalized_and_canonical_on_construction(self):
        q = UnitQuaternion(0.0, 0.0, 2.0, -2.0)
        assert abs(np.linalg.norm(q.xyzw) - 1.0) < 1e-12
        assert q.w >= 0.0

    def test_identity_multiply(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = random_quat(rng)
            r = quat_multiply(UnitQuaternion.identity(), q)
            assert r.angle_to(q) < 1e-12

    def test_inverse_multiply_gives_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            q = random_quat(rng)
            r = quat_multiply(q, q.inverse())
            assert r.angle_to(UnitQuaternion.identity()) < 1e-12

    def test_two_quarter_turns_make_half_turn(self):
        # Oracle: product of the corresponding rotation matrices.
        qa = UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2)
        qb = UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2)
        q_half = UnitQuaternion.from_axis_angle([0, 0, 1], math.pi)
        prod = quat_multiply(qa, qb)
        assert np.allclose(prod.rotation_matrix(),
                           qa.rotation_matrix() @ qb.rotation_matrix(), atol=1e-12)
        assert prod.angle_to(q_half) < 1e-12

    def test_matrix_of_product_is_product_of_matrices(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a, b = random_quat(rng), random_quat(rng)
            lhs = quat_multiply(a, b).rotation_matrix()
            rhs = a.rotation_matrix() @ b.rotation_matrix()
            assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_rotation_matrix_round_trip(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            q = random_quat(rng)
            r = UnitQuaternion.from_rotation_matrix(q.rotation_matrix())
            assert q.angle_to(r) < 1e-9

    def test_rotation_matrix_is_passive_dcm(self):
        # Rotating the frame by +90 deg about z sends global x onto frame -y.
        q = UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2)
        v = q.rotate([1.0, 0.0, 0.0])
        assert np.allclose(v, [0.0, -1.0, 0.0], atol=1e-12)


class TestSmallAngleQuat:
    def test_zero_is_identity(self):
        q = small_angle_quat([0.0, 0.0, 0.0])
        assert np.allclose(q.xyzw, [0, 0, 0, 1])

    def test_tiny_angle_matches_exp_map(self):
        q = small_angle_quat([1e-6, 0.0, 0.0])
        assert abs(q.angle() - 1e-6) < 1e-12
        assert quat_angle(q.xyzw, exp_map_xyzw([1e-6, 0, 0])) < 1e-15

    def test_moderate_angle_first_order_accuracy(self):
        q = small_angle_quat([0.0, 0.0, 0.2])
        assert quat_angle(q.xyzw, exp_map_xyzw([0, 0, 0.2])) < 1e-3

    def test_zero_error_composition_recovers_exactly(self):
        rng = np.random.default_rng(4)
        q = random_quat(rng)
        assert quat_multiply(small_angle_quat(np.zeros(3)), q).angle_to(q) == 0.0

    def test_small_angle_matrix_first_order(self):
        d = np.array([1e-4, -2e-4, 0.5e-4])
        R = small_angle_quat(d).rotation_matrix()
        assert np.max(np.abs(R - (np.eye(3) - skew(d)))) < 1e-7


class TestSkewAndOmega:
    def test_skew_zero(self):
        assert np.all(skew([0, 0, 0]) == 0.0)

    def test_skew_cross_identity(self):
        assert np.allclose(skew([1, 0, 0]) @ [0, 1, 0], [0, 0, 1])
        rng = np.random.default_rng(5)
        for _ in range(50):
            v, w = rng.normal(size=3), rng.normal(size=3)
            assert np.allclose(skew(v) @ w, np.cross(v, w), atol=1e-12)
            assert np.allclose(skew(v) @ v, 0.0, atol=1e-12)
            assert np.allclose(skew(v).T, -skew(v))

    def test_omega_zero(self):
        assert np.all(omega_matrix([0, 0, 0]) == 0.0)

    def test_omega_block_layout(self):
        w = np.array([1.0, 2.0, 3.0])
        O = omega_matrix(w)
        assert np.allclose(O[:3, :3], -skew(w))
        assert np.allclose(O[:3, 3], w)
        assert np.allclose(O[3, :3], -w)
        assert O[3, 3] == 0.0

    def test_omega_antisymmetric(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            O = omega_matrix(rng.normal(size=3))
            assert np.allclose(O + O.T, 0.0, atol=1e-12)

    def test_quarter_turn_integration_against_closed_form(self):
        # Integrate q_dot = 0.5 Omega(w) q with w = [0,0,pi/2] over 1 s via
        # many small exact sub-steps and check a 90 degree yaw resulted.
        w = np.array([0.0, 0.0, math.pi / 2])
        q = np.array([0.0, 0.0, 0.0, 1.0])
        q = integrate_quat_constant_rate(q, w, 1.0)
        target = UnitQuaternion.from_axis_angle([0, 0, 1], math.pi / 2)
        assert quat_angle(q, target.xyzw) < 1e-6

    def test_omega_matches_first_order_step(self):
        # For small dt, q + 0.5*Omega(w)*q*dt is the first-order rotation update.
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = random_quat(rng)
            w = rng.normal(size=3)
            dt = 1e-6
            stepped = q.xyzw + 0.5 * omega_matrix(w) @ q.xyzw * dt
            stepped /= np.linalg.norm(stepped)
            exact = integrate_quat_constant_rate(q.xyzw, w, dt)
            assert quat_angle(stepped, exact) < 1e-10


class TestPose:
    def test_compose_associative_and_inverse(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            poses = [Pose(random_quat(rng), rng.normal(size=3)) for _ in range(3)]
            a, b, c = poses
            lhs = a.compose(b).compose(c)
            rhs = a.compose(b.compose(c))
            assert lhs.almost_equal(rhs, tol=1e-9)
            assert a.compose(a.inverse()).almost_equal(Pose.identity(), tol=1e-9)
            assert a.inverse().compose(a).almost_equal(Pose.identity(), tol=1e-9)

    def test_transform_untransform_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            pose = Pose(random_quat(rng), rng.normal(size=3))
            x = rng.normal(size=3)
            assert np.allclose(pose.untransform(pose.transform(x)), x, atol=1e-12)

    def test_compose_matches_point_chaining(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            a = Pose(random_quat(rng), rng.normal(size=3))
            b = Pose(random_quat(rng), rng.normal(size=3))
            x = rng.normal(size=3)
            assert np.allclose(a.compose(b).transform(x), a.transform(b.transform(x)),
                               atol=1e-12)

    def test_identity_pose(self):
        x = np.array([1.0, 2.0, 3.0])
        assert np.allclose(Pose.identity().transform(x), x)


def test_small_angle_quat_is_first_order_exp():
    # Jacobian of (small_angle_quat(d) * q).vec wrt d at d=0 equals that of the
    # exact exponential composition, confirming the linearization is faithful.
    rng = np.random.default_rng(11)
    q = random_quat(rng)

    def via_small_angle(d):
        return quat_multiply(small_angle_quat(d), q).xyzw

    def via_exp(d):
        return quat_multiply(UnitQuaternion.from_xyzw(exp_map_xyzw(d)), q).xyzw

    J1 = numeric_jacobian(via_small_angle, np.zeros(3))
    J2 = numeric_jacobian(via_exp, np.zeros(3))
    assert np.max(np.abs(J1 - J2)) < 1e-8


@pytest.mark.parametrize("axis,angle", [([1, 0, 0], 0.3), ([0, 1, 0], -1.2), ([1, 1, 1], 2.5)])
def test_axis_angle_against_rodrigues(axis, angle):
    from _oracles import rotmat_about_axis

    q = UnitQuaternion.from_axis_angle(axis, angle)
    # Passive DCM is the transpose of the active Rodrigues rotation.
    assert np.allclose(q.rotation_matrix(), rotmat_about_axis(axis, angle).T, atol=1e-12)
