import dataclasses
import math
import warnings

import numpy as np
import pytest

from plvio.config import KEY_DOCS, RunConfig
from plvio.errors import DanglingTrackId, NoOverlap, NonMonotonicTime, ParseError
from plvio.frontend_sim import CameraModel, ObservationSynthesizer, SimWorld, SinusoidTrajectory
from plvio.geom import Pose, UnitQuaternion
from plvio.io import (
    TrajectorySample,
    ingest_imu_csv,
    ingest_tracks,
    read_groundtruth_csv,
    read_trajectory_tum,
    write_groundtruth_csv,
    write_imu_csv,
    write_tracks,
    write_trajectory_tum,
)
from plvio.propagation import ImuSample, NoiseParams
from plvio.frontend_sim import synthesize_imu


class TestImuCsv:
    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "imu.csv"
        path.write_text("")
        assert ingest_imu_csv(path) == []

    def test_single_row_round_trip(self, tmp_path):
        path = tmp_path / "imu.csv"
        s = ImuSample(123456789, [0.1, -0.2, 0.3], [9.7, 0.01, -0.02])
        write_imu_csv(path, [s])
        out = ingest_imu_csv(path)
        assert len(out) == 1
        assert out[0].timestamp == s.timestamp
        assert np.array_equal(out[0].gyro, s.gyro)
        assert np.array_equal(out[0].accel, s.accel)

    def test_full_stream_round_trip(self, tmp_path):
        traj = SinusoidTrajectory(duration=1.0)
        samples = synthesize_imu(traj, NoiseParams(), 3, 100,
                                 np.array([0, 0, -9.81]))
        path = tmp_path / "imu.csv"
        write_imu_csv(path, samples)
        out = ingest_imu_csv(path)
        assert len(out) == len(samples)
        for a, b in zip(samples, out):
            assert a.timestamp == b.timestamp
            assert np.array_equal(a.gyro, b.gyro)
            assert np.array_equal(a.accel, b.accel)

    def test_out_of_order_timestamps_name_the_line(self, tmp_path):
        path = tmp_path / "imu.csv"
        path.write_text("100,0,0,0,0,0,9.8\n50,0,0,0,0,0,9.8\n")
        with pytest.raises(NonMonotonicTime, match="2"):
            ingest_imu_csv(path)

    def test_bad_field_count(self, tmp_path):
        path = tmp_path / "imu.csv"
        path.write_text("100,0,0,0\n")
        with pytest.raises(ParseError):
            ingest_imu_csv(path)


class TestTracksFile:
    def simulated_frames(self, n=5, seed=2):
        world = SimWorld.generate(seed=seed, n_points=60, n_segments=15)
        traj = SinusoidTrajectory(duration=2.0)
        synth = ObservationSynthesizer(world, traj, CameraModel(), noise_px=1e-3,
                                       seed=seed)
        return [synth.frame(k, 0.1 * k) for k in range(n)]

    def test_simulator_output_round_trips(self, tmp_path):
        frames = self.simulated_frames()
        path = tmp_path / "tracks.txt"
        write_tracks(path, frames)
        bundles = ingest_tracks(path)
        assert len(bundles) == len(frames)
        for fr, b in zip(frames, bundles):
            assert b.frame_id == fr.frame_id
            src_points = {tid: obs for tid, _, obs, _ in fr.points}
            assert set(tid for tid, _ in b.points) == set(src_points)
            for tid, obs in b.points:
                assert np.array_equal(obs.left_uv, src_points[tid].left_uv)
                if src_points[tid].right_uv is None:
                    assert obs.right_uv is None
                else:
                    assert np.array_equal(obs.right_uv, src_points[tid].right_uv)
            src_descs = {tid: d for tid, _, _, d in fr.points}
            assert b.descriptors == src_descs
            src_lines = {tid: obs for tid, _, obs in fr.lines}
            assert set(tid for tid, _ in b.lines) == set(src_lines)
            for tid, obs in b.lines:
                src = src_lines[tid]
                assert np.array_equal(obs.left.endpoints, src.left.endpoints)
                assert np.allclose(obs.left.normal, src.left.normal, atol=1e-15)
                assert np.allclose(obs.left.point, src.left.point, atol=1e-15)

    def test_non_unit_normal_normalized_with_warning(self, tmp_path):
        path = tmp_path / "tracks.txt"
        path.write_text("L 0 5 0 0.0 0.0 0.2 0.0 0.1 0.0 0.0 2.0\n")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            bundles = ingest_tracks(path)
        assert any("normal" in str(w.message) for w in caught)
        _, obs = bundles[0].lines[0]
        assert abs(np.linalg.norm(obs.left.normal) - 1.0) < 1e-12

    def test_unknown_tag_rejected(self, tmp_path):
        path = tmp_path / "tracks.txt"
        path.write_text("Q 0 1 0 0.0 0.0\n")
        with pytest.raises(ParseError, match="unknown record tag"):
            ingest_tracks(path)

    def test_dangling_right_camera_record(self, tmp_path):
        path = tmp_path / "tracks.txt"
        path.write_text("P 0 7 1 0.1 0.2\n")
        with pytest.raises(DanglingTrackId):
            ingest_tracks(path)


class TestTrajectoryFiles:
    def random_samples(self, rng, n=10):
        out = []
        for i in range(n):
            pose = Pose(UnitQuaternion.from_xyzw(rng.normal(size=4)),
                        rng.normal(size=3))
            out.append(TrajectorySample(int(1e8 * i), pose))
        return out

    def test_tum_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        samples = self.random_samples(rng)
        path = tmp_path / "traj.tum"
        write_trajectory_tum(path, samples)
        out = read_trajectory_tum(path)
        assert len(out) == len(samples)
        for a, b in zip(samples, out):
            assert abs(a.timestamp - b.timestamp) <= 1
            assert b.pose.almost_equal(a.pose, tol=1e-9)

    def test_groundtruth_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        samples = self.random_samples(rng)
        path = tmp_path / "gt.csv"
        write_groundtruth_csv(path, samples)
        out = read_groundtruth_csv(path)
        for a, b in zip(samples, out):
            assert a.timestamp == b.timestamp
            assert b.pose.almost_equal(a.pose, tol=1e-12)


class TestRunConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = RunConfig()
        path = tmp_path / "run.cfg"
        cfg.to_file(path)
        out = RunConfig.from_file(path)
        assert out == cfg

    def test_non_default_round_trip(self, tmp_path):
        cfg = RunConfig(seed=42, enable_lines=False, sin_amplitude=(2.0, 0.5, 0.1),
                        trajectory="square", chi2_confidence=0.99)
        path = tmp_path / "run.cfg"
        cfg.to_file(path)
        assert RunConfig.from_file(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("not_a_key = 3\n")
        with pytest.raises(ParseError, match="unknown configuration key"):
            RunConfig.from_file(path)

    def test_bad_value_names_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nseed = banana\n")
        with pytest.raises(ParseError, match="2"):
            RunConfig.from_file(path)

    def test_comments_and_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("\n# full comment\nseed = 9  # trailing comment\n")
        assert RunConfig.from_file(path).seed == 9

    def test_every_key_documented(self):
        names = {f.name for f in dataclasses.fields(RunConfig)}
        assert names == set(KEY_DOCS)

    def test_derived_configs_consistent(self):
        cfg = RunConfig(sigma_point=0.004, sigma_loop_scale=3.0,
                        keyframe_angle_deg=30.0)
        assert cfg.update_config().sigma_loop == pytest.approx(0.012)
        assert cfg.loop_detection_config().keyframe_angle == pytest.approx(math.radians(30))
