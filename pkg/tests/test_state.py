import numpy as np
import pytest

from plvio.errors import DimensionMismatch, WindowFull
from plvio.geom import Pose, UnitQuaternion
from plvio.state import (
    CLONE_ERR_DIM,
    FilterState,
    ImuExtrinsics,
    ImuState,
    augment_clone,
    inject_error,
    pose_error,
    prune_clones,
)

from _oracles import numeric_jacobian


def random_state(rng, n_clones=0, estimate_extrinsics=False):
    imu = ImuState(
        q_GB=UnitQuaternion.from_xyzw(rng.normal(size=4)),
        bg=0.01 * rng.normal(size=3),
        v_GB=rng.normal(size=3),
        ba=0.05 * rng.normal(size=3),
        p_GB=rng.normal(size=3),
        extrinsics=ImuExtrinsics(
            q_CB=UnitQuaternion.from_xyzw(rng.normal(size=4)),
            p_BC=0.1 * rng.normal(size=3),
        ),
    )
    st = FilterState(imu, estimate_extrinsics=estimate_extrinsics, max_clones=6)
    dim = st.imu_err_dim()
    A = rng.normal(size=(dim, dim))
    st.cov = A @ A.T / dim + 1e-6 * np.eye(dim)
    for i in range(n_clones):
        augment_clone(st, timestamp=int(1e9 * (i + 1)), frame_id=i)
        # Move the IMU a bit between clones so the window is not degenerate.
        st.imu.p_GB = st.imu.p_GB + rng.normal(size=3) * 0.1
    return st


class TestAugmentClone:
    def test_identity_everything_gives_identity_clone(self):
        st = FilterState(ImuState())
        st.cov = np.eye(st.imu_err_dim()) * 0.1
        augment_clone(st, timestamp=0, frame_id=0)
        assert st.clones[0].pose.almost_equal(Pose.identity())
        # New block duplicates the IMU attitude/position covariance.
        s = st.clone_slice(0)
        assert np.allclose(st.cov[s, s][:3, :3], 0.1 * np.eye(3))
        assert np.allclose(st.cov[s, s][3:, 3:], 0.1 * np.eye(3))

    def test_dimension_grows_by_six(self):
        rng = np.random.default_rng(0)
        st = random_state(rng)
        dim = st.err_dim()
        augment_clone(st, timestamp=1, frame_id=0)
        assert st.err_dim() == dim + CLONE_ERR_DIM
        assert st.cov.shape == (dim + 6, dim + 6)

    def test_window_full_raises(self):
        rng = np.random.default_rng(1)
        st = random_state(rng, n_clones=6)
        with pytest.raises(WindowFull):
            augment_clone(st, timestamp=int(1e10), frame_id=99)

    @pytest.mark.parametrize("estimate_extrinsics", [False, True])
    def test_jacobian_matches_finite_differences(self, estimate_extrinsics):
        rng = np.random.default_rng(2)
        for _ in range(20):
            st = random_state(rng, estimate_extrinsics=estimate_extrinsics)
            dim = st.imu_err_dim()

            def clone_pose_err(dx_imu):
                pert = st.copy()
                inject_error(pert, dx_imu)
                return pose_error(pert.imu.camera_pose(), st.imu.camera_pose())

            J_fd = numeric_jacobian(clone_pose_err, np.zeros(dim))
            st2 = st.copy()
            augment_clone(st2, timestamp=1, frame_id=0)
            # Recover the analytic Jacobian from the augmented covariance:
            # cross = J P  =>  J = cross P^-1.
            cross = st2.cov[dim:, :dim]
            J = cross @ np.linalg.inv(st.cov)
            assert np.max(np.abs(J - J_fd)) < 1e-6

    def test_monotonic_timestamps_enforced(self):
        rng = np.random.default_rng(3)
        st = random_state(rng, n_clones=2)
        with pytest.raises(DimensionMismatch):
            augment_clone(st, timestamp=0, frame_id=77)


class TestPruneClones:
    def test_dimension_shrinks(self):
        rng = np.random.default_rng(4)
        st = random_state(rng, n_clones=6)
        dim = st.err_dim()
        _, removed = prune_clones(st, policy="oldest_first", count=1)
        assert len(removed) == 1
        assert st.err_dim() == dim - 6

    def test_oldest_first_removes_min_timestamp(self):
        rng = np.random.default_rng(5)
        st = random_state(rng, n_clones=5)
        oldest = min(c.timestamp for c in st.clones)
        _, removed = prune_clones(st, policy="oldest_first", count=1)
        assert removed[0].timestamp == oldest

    def test_remaining_marginals_unchanged(self):
        rng = np.random.default_rng(6)
        st = random_state(rng, n_clones=6)
        frame_ids = [c.frame_id for c in st.clones]
        blocks_before = {
            fid: st.cov[st.clone_slice(i), st.clone_slice(i)].copy()
            for i, fid in enumerate(frame_ids)
        }
        _, removed = prune_clones(st, policy="evenly_spaced")
        removed_ids = {c.frame_id for c in removed}
        for i, clone in enumerate(st.clones):
            assert clone.frame_id not in removed_ids
            s = st.clone_slice(i)
            assert np.allclose(st.cov[s, s], blocks_before[clone.frame_id])

    def test_evenly_spaced_takes_every_other_oldest(self):
        rng = np.random.default_rng(7)
        st = random_state(rng, n_clones=6)
        ids = [c.frame_id for c in st.clones]
        _, removed = prune_clones(st, policy="evenly_spaced")
        assert [c.frame_id for c in removed] == [ids[0], ids[2]]


class TestInjectError:
    def test_zero_is_noop(self):
        rng = np.random.default_rng(8)
        st = random_state(rng, n_clones=3)
        before = st.copy()
        inject_error(st, np.zeros(st.err_dim()))
        assert st.imu.q_GB.angle_to(before.imu.q_GB) == 0.0
        assert np.allclose(st.imu.p_GB, before.imu.p_GB)
        for c0, c1 in zip(before.clones, st.clones):
            assert c1.pose.almost_equal(c0.pose, tol=1e-15)

    def test_pure_position_shift(self):
        rng = np.random.default_rng(9)
        st = random_state(rng, n_clones=1)
        before = st.copy()
        dx = np.zeros(st.err_dim())
        dx[12:15] = [1.0, 0.0, 0.0]
        inject_error(st, dx)
        assert np.allclose(st.imu.p_GB, before.imu.p_GB + [1, 0, 0])
        assert st.imu.q_GB.angle_to(before.imu.q_GB) == 0.0
        assert np.allclose(st.imu.v_GB, before.imu.v_GB)
        assert st.clones[0].pose.almost_equal(before.clones[0].pose, tol=1e-15)

    def test_round_trip_small_dx(self):
        rng = np.random.default_rng(10)
        st = random_state(rng, n_clones=2)
        before = st.copy()
        dx = 1e-4 * rng.normal(size=st.err_dim())
        inject_error(st, dx)
        inject_error(st, -dx)
        assert st.imu.q_GB.angle_to(before.imu.q_GB) < 1e-9
        assert np.allclose(st.imu.p_GB, before.imu.p_GB, atol=1e-9)
        for c0, c1 in zip(before.clones, st.clones):
            assert c1.pose.almost_equal(c0.pose, tol=1e-9)

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(11)
        st = random_state(rng, n_clones=1)
        with pytest.raises(DimensionMismatch):
            inject_error(st, np.zeros(st.err_dim() + 1))


def test_cov_stays_symmetric_through_lifecycle():
    rng = np.random.default_rng(12)
    st = random_state(rng)
    for i in range(6):
        augment_clone(st, timestamp=int(1e9 * (i + 1)), frame_id=i)
        inject_error(st, 1e-3 * rng.normal(size=st.err_dim()))
    prune_clones(st, policy="evenly_spaced")
    assert np.max(np.abs(st.cov - st.cov.T)) < 1e-9
    assert st.cov.shape == (st.err_dim(), st.err_dim())
    # Clone bookkeeping invariants.
    ts = [c.timestamp for c in st.clones]
    assert ts == sorted(ts)
    fids = [c.frame_id for c in st.clones]
    assert len(set(fids)) == len(fids)
