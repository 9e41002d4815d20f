"""Run configuration: one flat key=value file drives simulation, filter,
and loop-closure settings.

Unknown keys are rejected (typo protection).  Values are parsed by the type
of the default: bool accepts true/false/1/0, vectors are comma-separated
floats.  Every key and its default is documented in KEY_DOCS.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .errors import ParseError
from .frontend_sim import CameraModel, SinusoidTrajectory, SquareLoopTrajectory
from .loopdet import LoopConfig
from .point_meas import StereoRig, TriangulationConfig
from .propagation import NoiseParams
from .update import UpdateConfig


@dataclass
class RunConfig:
    # simulation
    seed: int = 1
    duration_s: float = 60.0
    imu_rate_hz: float = 200.0
    camera_rate_hz: float = 10.0
    trajectory: str = "sinusoid"            # sinusoid | square
    traj_center: tuple = (0.0, 0.0, 0.5)
    sin_amplitude: tuple = (1.2, 1.2, 0.3)
    sin_frequency: tuple = (0.40, 0.27, 0.53)
    sin_phase: tuple = (0.0, math.pi / 2, 0.0)
    yaw_amplitude: float = 0.7
    yaw_frequency: float = 0.31
    pitch_amplitude: float = 0.12
    pitch_frequency: float = 0.67
    roll_amplitude: float = 0.10
    roll_frequency: float = 0.83
    square_side: float = 3.0
    square_edge_time: float = 6.0
    square_corner_time: float = 2.5
    square_height: float = 0.5
    square_laps: int = 1

    # world
    n_world_points: int = 120
    n_world_segments: int = 40
    world_radius: float = 6.0

    # camera
    stereo_baseline: float = 0.1
    fov_tan: float = 1.0
    min_depth: float = 0.3
    max_depth: float = 30.0
    max_points_per_frame: int = 60
    max_lines_per_frame: int = 30

    # sensor noise and corruption
    gyro_noise_density: float = 1.7e-4
    accel_noise_density: float = 2.0e-3
    gyro_bias_randomwalk: float = 1.0e-5
    accel_bias_randomwalk: float = 1.0e-4
    init_gyro_bias: tuple = (0.0, 0.0, 0.0)
    init_accel_bias: tuple = (0.0, 0.0, 0.0)
    imu_noisy: bool = True
    pixel_sigma: float = 0.002
    outlier_rate: float = 0.0
    dropout_rate: float = 0.05
    descriptor_flip_prob: float = 0.05

    # filter
    window_size: int = 20
    prune_policy: str = "evenly_spaced"     # evenly_spaced | oldest_first
    min_track_frames: int = 2
    sigma_point: float = 0.002
    sigma_line: float = 0.002
    sigma_loop_scale: float = 2.0
    loop_map_sigma: float = 0.0
    chi2_confidence: float = 0.95
    max_stacked_rows: int = 1500
    enable_points: bool = True
    enable_lines: bool = True
    enable_loop_closure: bool = True
    enable_oc: bool = True
    estimate_extrinsics: bool = False
    use_two_point_ransac: bool = True
    use_circular_check: bool = True
    ransac_threshold: float = 0.008
    init_sigma_theta: float = 0.01
    init_sigma_bg: float = 0.005
    init_sigma_v: float = 0.05
    init_sigma_ba: float = 0.05
    init_sigma_p: float = 0.01
    init_perturb: bool = False
    tri_min_baseline: float = 0.02
    tri_reproj_gate: float = 0.01

    # loop closure
    min_tracked_for_keyframe: int = 10
    keyframe_distance: float = 0.3
    keyframe_angle_deg: float = 15.0
    max_keyframes: int = 500
    exclusion_window: int = 30
    min_candidate_matches: int = 12
    min_loop_inliers: int = 20
    hamming_max: int = 64
    ratio_test: float = 0.8
    fm_threshold: float = 0.01
    pnp_threshold: float = 0.01
    loop_min_live_tracks: int = 5
    sync_loop_detection: bool = True

    # -- derived module configs ---------------------------------------------

    def noise_params(self) -> NoiseParams:
        return NoiseParams(self.gyro_noise_density, self.accel_noise_density,
                           self.gyro_bias_randomwalk, self.accel_bias_randomwalk)

    def update_config(self) -> UpdateConfig:
        return UpdateConfig(sigma_point=self.sigma_point, sigma_line=self.sigma_line,
                            sigma_loop=self.sigma_loop_scale * self.sigma_point,
                            chi2_confidence=self.chi2_confidence,
                            max_stacked_rows=self.max_stacked_rows,
                            loop_map_sigma=self.loop_map_sigma)

    def loop_detection_config(self) -> LoopConfig:
        return LoopConfig(
            min_tracked=self.min_tracked_for_keyframe,
            keyframe_distance=self.keyframe_distance,
            keyframe_angle=math.radians(self.keyframe_angle_deg),
            max_keyframes=self.max_keyframes,
            exclusion_window=self.exclusion_window,
            min_candidate_matches=self.min_candidate_matches,
            min_loop_inliers=self.min_loop_inliers,
            hamming_max=self.hamming_max,
            ratio_test=self.ratio_test,
            fm_threshold=self.fm_threshold,
            pnp_threshold=self.pnp_threshold,
            seed=self.seed)

    def triangulation_config(self) -> TriangulationConfig:
        return TriangulationConfig(min_baseline=self.tri_min_baseline,
                                   reprojection_gate=self.tri_reproj_gate)

    def camera_model(self) -> CameraModel:
        import numpy as np
        rig = StereoRig(baseline=np.array([self.stereo_baseline, 0.0, 0.0]))
        return CameraModel(rig=rig, fov_tan=self.fov_tan,
                           min_depth=self.min_depth, max_depth=self.max_depth)

    def make_trajectory(self):
        if self.trajectory == "sinusoid":
            return SinusoidTrajectory(
                duration=self.duration_s, center=self.traj_center,
                amplitude=self.sin_amplitude, frequency=self.sin_frequency,
                phase=self.sin_phase,
                yaw_amplitude=self.yaw_amplitude, yaw_frequency=self.yaw_frequency,
                pitch_amplitude=self.pitch_amplitude, pitch_frequency=self.pitch_frequency,
                roll_amplitude=self.roll_amplitude, roll_frequency=self.roll_frequency)
        if self.trajectory == "square":
            return SquareLoopTrajectory(
                side=self.square_side, edge_time=self.square_edge_time,
                corner_time=self.square_corner_time, height=self.square_height,
                laps=self.square_laps)
        raise ParseError(f"unknown trajectory type {self.trajectory!r}")

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)

    # -- file round trip ------------------------------------------------------

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# plvio run configuration\n")
            for f in dataclasses.fields(self):
                v = getattr(self, f.name)
                if isinstance(v, tuple):
                    v = ",".join(repr(float(x)) for x in v)
                elif isinstance(v, bool):
                    v = "true" if v else "false"
                elif isinstance(v, float):
                    v = repr(v)
                fh.write(f"{f.name} = {v}\n")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        values = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ParseError("expected key = value", path=str(path), line=lineno)
                key, _, val = line.partition("=")
                key = key.strip()
                val = val.strip()
                if key not in fields:
                    raise ParseError(f"unknown configuration key {key!r}",
                                     path=str(path), line=lineno)
                try:
                    values[key] = _convert(val, getattr(defaults, key))
                except ValueError as exc:
                    raise ParseError(f"bad value for {key}: {exc}",
                                     path=str(path), line=lineno) from exc
        return cls(**values)


def _convert(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(","))
    return text


KEY_DOCS = {
    "seed": "master seed; the whole run is a pure function of (config, seed)",
    "duration_s": "trajectory duration in seconds",
    "imu_rate_hz": "IMU sample rate (must be an integer multiple of the camera rate)",
    "camera_rate_hz": "stereo frame rate",
    "trajectory": "sinusoid (default) or square (closed loop with corner turns)",
    "traj_center": "sinusoid center, meters",
    "sin_amplitude": "per-axis position amplitude, meters",
    "sin_frequency": "per-axis angular frequency, rad/s",
    "sin_phase": "per-axis phase, rad",
    "yaw_amplitude": "yaw oscillation amplitude, rad",
    "yaw_frequency": "yaw oscillation frequency, rad/s",
    "pitch_amplitude": "pitch oscillation amplitude, rad",
    "pitch_frequency": "pitch oscillation frequency, rad/s",
    "roll_amplitude": "roll oscillation amplitude, rad",
    "roll_frequency": "roll oscillation frequency, rad/s",
    "square_side": "square trajectory side length, meters",
    "square_edge_time": "seconds to traverse one edge",
    "square_corner_time": "seconds to yaw 90 degrees at each corner",
    "square_height": "constant height of the square path",
    "square_laps": "number of laps around the square",
    "n_world_points": "number of point landmarks on the shell",
    "n_world_segments": "number of 3D line segments on the shell",
    "world_radius": "shell radius around the trajectory, meters",
    "stereo_baseline": "right camera offset along camera x, meters",
    "fov_tan": "field-of-view half-extent in normalized coordinates",
    "min_depth": "closest observable depth, meters",
    "max_depth": "farthest observable depth, meters",
    "max_points_per_frame": "per-frame cap on emitted point features",
    "max_lines_per_frame": "per-frame cap on emitted line features",
    "gyro_noise_density": "rad/s/sqrt(Hz)",
    "accel_noise_density": "m/s^2/sqrt(Hz)",
    "gyro_bias_randomwalk": "rad/s^2/sqrt(Hz)",
    "accel_bias_randomwalk": "m/s^3/sqrt(Hz)",
    "init_gyro_bias": "true initial gyro bias, rad/s",
    "init_accel_bias": "true initial accel bias, m/s^2",
    "imu_noisy": "false gives bias-plus-truth-only IMU (no stochastic noise)",
    "pixel_sigma": "image noise std, normalized units (0.002 ~ 1 px at f=500)",
    "outlier_rate": "probability an observation becomes a wrong association",
    "dropout_rate": "per-frame probability a track terminates",
    "descriptor_flip_prob": "per-bit flip probability of observed descriptors",
    "window_size": "maximum number of camera-pose clones",
    "prune_policy": "evenly_spaced (default) or oldest_first",
    "min_track_frames": "minimum frames before a terminated track updates",
    "sigma_point": "point measurement noise std, normalized units",
    "sigma_line": "line measurement noise std, normalized units",
    "sigma_loop_scale": "sigma_loop = scale * sigma_point",
    "loop_map_sigma": "stored map-point uncertainty in meters (0 disables inflation)",
    "chi2_confidence": "gating confidence in (0, 1)",
    "max_stacked_rows": "rows triggering intermediate QR compression",
    "enable_points": "use point-feature updates",
    "enable_lines": "use line-feature updates",
    "enable_loop_closure": "run keyframe selection, detection, closure updates",
    "enable_oc": "apply the observability-constrained fix to Phi and H",
    "estimate_extrinsics": "include IMU-camera extrinsics in the error state",
    "use_two_point_ransac": "gyro-aided 2-point RANSAC on temporal matches",
    "use_circular_check": "4-way stereo/temporal chain check",
    "ransac_threshold": "Sampson gate for 2-point RANSAC, normalized units",
    "init_sigma_theta": "initial attitude std, rad",
    "init_sigma_bg": "initial gyro-bias std, rad/s",
    "init_sigma_v": "initial velocity std, m/s",
    "init_sigma_ba": "initial accel-bias std, m/s^2",
    "init_sigma_p": "initial position std, m",
    "init_perturb": "draw the initial state error from the initial covariance",
    "tri_min_baseline": "minimum monocular triangulation baseline, meters",
    "tri_reproj_gate": "mean reprojection gate after triangulation",
    "min_tracked_for_keyframe": "feature count required to select a keyframe",
    "keyframe_distance": "translation novelty threshold, meters",
    "keyframe_angle_deg": "rotation novelty threshold, degrees",
    "max_keyframes": "database capacity (oldest evicted)",
    "exclusion_window": "most-recent keyframes never matched against",
    "min_candidate_matches": "descriptor matches required to attempt verification",
    "min_loop_inliers": "verified matches required to accept a loop",
    "hamming_max": "descriptor distance ceiling for a match",
    "ratio_test": "best/second-best Hamming ratio ceiling",
    "fm_threshold": "Sampson gate of the fundamental RANSAC",
    "pnp_threshold": "reprojection gate of the PnP RANSAC",
    "loop_min_live_tracks": "live loop features needed to keep correcting",
    "sync_loop_detection": "run detection inline (deterministic) vs worker thread",
}
