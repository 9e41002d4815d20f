"""Deterministic synthetic sensor front-end.

Generates a landmark world, an analytic trajectory with exact derivatives,
IMU streams, and stereo point/line observations with configurable noise,
wrong-association outliers, and track dropout.  Everything is a pure function
of (config, seed): equal seeds give bit-identical streams.

Also hosts the correspondence-level robustness utilities that normally sit on
top of a real image pipeline: gyro-aided 2-point RANSAC, 4-way circular match
checking, and brightness-gated histogram matching.

Ground truth (poses, landmark positions, outlier labels) is retained for
every emitted measurement so estimator components can be checked against
exact oracles; the estimator itself only consumes the measurements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, TooFewMatches
from .geom import Pose, UnitQuaternion, skew
from .line_meas import LineMeas, LineObservation
from .point_meas import StereoObservation, StereoRig
from .propagation import ImuSample, NoiseParams
from .state import ImuExtrinsics

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = DESCRIPTOR_BITS // 8


# ---------------------------------------------------------------------------
# World


@dataclass
class SimWorld:
    points: list  # (id, position)
    segments: list  # (id, p_b, p_e)
    seed: int
    signatures: dict = field(default_factory=dict)  # landmark id -> 32 bytes

    @classmethod
    def generate(cls, seed: int, n_points: int = 120, n_segments: int = 40,
                 radius: float = 6.0, height_range=(-1.0, 2.5),
                 center=(0.0, 0.0, 0.0)) -> "SimWorld":
        """Landmarks on a cylindrical shell around the working volume, visible
        from any heading; segments mix vertical and oblique orientations."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        center = np.asarray(center, dtype=float)
        points = []
        for i in range(n_points):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            r = radius * rng.uniform(0.85, 1.15)
            h = rng.uniform(*height_range)
            points.append((i, center + np.array([r * math.cos(ang), r * math.sin(ang), h])))
        segments = []
        for j in range(n_segments):
            ang = rng.uniform(0.0, 2.0 * math.pi)
            r = radius * rng.uniform(0.85, 1.15)
            h = rng.uniform(*height_range)
            mid = center + np.array([r * math.cos(ang), r * math.sin(ang), h])
            if j % 2 == 0:
                d = np.array([0.0, 0.0, 1.0])  # vertical edge
            else:
                d = rng.normal(size=3)
                d /= np.linalg.norm(d)
            half = rng.uniform(0.3, 0.8)
            segments.append((n_points + j, mid - half * d, mid + half * d))
        world = cls(points=points, segments=segments, seed=seed)
        sig_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE5C]))
        for lid, *_ in points + segments:
            world.signatures[lid] = sig_rng.integers(0, 256, DESCRIPTOR_BYTES,
                                                     dtype=np.uint8).tobytes()
        return world

    def observed_descriptor(self, landmark_id: int, frame_id: int,
                            flip_prob: float = 0.05) -> bytes:
        """Landmark signature with per-bit flips; deterministic in
        (world seed, landmark, frame)."""
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 0xF11B, landmark_id, frame_id]))
        bits = np.unpackbits(np.frombuffer(self.signatures[landmark_id], dtype=np.uint8))
        flips = rng.random(DESCRIPTOR_BITS) < flip_prob
        return np.packbits(bits ^ flips).tobytes()


def hamming_distance(a: bytes, b: bytes) -> int:
    return int(np.unpackbits(np.frombuffer(a, dtype=np.uint8)
                             ^ np.frombuffer(b, dtype=np.uint8)).sum())


# ---------------------------------------------------------------------------
# Trajectories


def _euler_zyx_to_q_GB(roll, pitch, yaw) -> UnitQuaternion:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    # Body-to-global R = Rz(yaw) Ry(pitch) Rx(roll); q_GB matrix is its transpose.
    R_bg = np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])
    return UnitQuaternion.from_rotation_matrix(R_bg.T)


def _euler_rates_to_body(roll, pitch, roll_dot, pitch_dot, yaw_dot) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    return np.array([
        roll_dot - yaw_dot * sp,
        pitch_dot * cr + yaw_dot * cp * sr,
        -pitch_dot * sr + yaw_dot * cp * cr,
    ])


class SinusoidTrajectory:
    """Composed per-axis sinusoids plus yaw/pitch/roll oscillation; twice
    differentiable with closed-form rates and accelerations."""

    def __init__(self, duration: float = 60.0, center=(0.0, 0.0, 0.5),
                 amplitude=(1.2, 1.2, 0.3), frequency=(0.40, 0.27, 0.53),
                 phase=(0.0, math.pi / 2, 0.0),
                 yaw_amplitude: float = 0.7, yaw_frequency: float = 0.31,
                 pitch_amplitude: float = 0.12, pitch_frequency: float = 0.67,
                 roll_amplitude: float = 0.10, roll_frequency: float = 0.83):
        self.duration = float(duration)
        self.center = np.asarray(center, dtype=float)
        self.amplitude = np.asarray(amplitude, dtype=float)
        self.frequency = np.asarray(frequency, dtype=float)
        self.phase = np.asarray(phase, dtype=float)
        self.angles = np.array([
            [roll_amplitude, roll_frequency],
            [pitch_amplitude, pitch_frequency],
            [yaw_amplitude, yaw_frequency],
        ])

    def _euler(self, t: float):
        amp, freq = self.angles[:, 0], self.angles[:, 1]
        ang = amp * np.sin(freq * t)
        rate = amp * freq * np.cos(freq * t)
        return ang, rate

    def position(self, t: float) -> np.ndarray:
        return self.center + self.amplitude * np.sin(self.frequency * t + self.phase)

    def velocity(self, t: float) -> np.ndarray:
        return self.amplitude * self.frequency * np.cos(self.frequency * t + self.phase)

    def acceleration(self, t: float) -> np.ndarray:
        return -self.amplitude * self.frequency ** 2 * np.sin(self.frequency * t + self.phase)

    def orientation(self, t: float) -> UnitQuaternion:
        (roll, pitch, yaw), _ = self._euler(t)
        return _euler_zyx_to_q_GB(roll, pitch, yaw)

    def body_rate(self, t: float) -> np.ndarray:
        (roll, pitch, _), (roll_dot, pitch_dot, yaw_dot) = self._euler(t)
        return _euler_rates_to_body(roll, pitch, roll_dot, pitch_dot, yaw_dot)

    def pose(self, t: float) -> Pose:
        return Pose(self.orientation(t), self.position(t))


def _quintic(s: float):
    """Smoothstep with zero first and second derivatives at both ends."""
    v = 10 * s ** 3 - 15 * s ** 4 + 6 * s ** 5
    dv = 30 * s ** 2 - 60 * s ** 3 + 30 * s ** 4
    ddv = 60 * s - 180 * s ** 2 + 120 * s ** 3
    return v, dv, ddv


class SquareLoopTrajectory:
    """Square circuit: quintic translation along each edge, quintic 90 degree
    yaw rotation at each corner, returning exactly to the start pose."""

    def __init__(self, side: float = 3.0, edge_time: float = 6.0,
                 corner_time: float = 2.5, height: float = 0.5, laps: int = 1):
        self.side = float(side)
        self.edge_time = float(edge_time)
        self.corner_time = float(corner_time)
        self.height = float(height)
        self.laps = int(laps)
        self.corners = [np.array([0.0, 0.0]), np.array([side, 0.0]),
                        np.array([side, side]), np.array([0.0, side])]
        self.segment_time = self.edge_time + self.corner_time
        self.lap_time = 4 * self.segment_time
        self.duration = self.lap_time * self.laps

    def center(self) -> np.ndarray:
        return np.array([self.side / 2, self.side / 2, self.height])

    def _locate(self, t: float):
        t = min(max(t, 0.0), self.duration - 1e-12)
        t_in_lap = t % self.lap_time
        seg = int(t_in_lap // self.segment_time)
        t_in_seg = t_in_lap - seg * self.segment_time
        return seg, t_in_seg

    def _state(self, t: float):
        seg, t_in_seg = self._locate(t)
        a = self.corners[seg]
        b = self.corners[(seg + 1) % 4]
        yaw0 = seg * (math.pi / 2)
        if t_in_seg < self.edge_time:
            s = t_in_seg / self.edge_time
            v, dv, ddv = _quintic(s)
            xy = a + (b - a) * v
            vel = (b - a) * dv / self.edge_time
            acc = (b - a) * ddv / self.edge_time ** 2
            return xy, vel, acc, yaw0, 0.0
        s = (t_in_seg - self.edge_time) / self.corner_time
        v, dv, _ = _quintic(s)
        yaw = yaw0 + (math.pi / 2) * v
        yaw_dot = (math.pi / 2) * dv / self.corner_time
        return b, np.zeros(2), np.zeros(2), yaw, yaw_dot

    def position(self, t: float) -> np.ndarray:
        xy, *_ = self._state(t)
        return np.array([xy[0], xy[1], self.height])

    def velocity(self, t: float) -> np.ndarray:
        _, vel, *_ = self._state(t)
        return np.array([vel[0], vel[1], 0.0])

    def acceleration(self, t: float) -> np.ndarray:
        _, _, acc, _, _ = self._state(t)
        return np.array([acc[0], acc[1], 0.0])

    def orientation(self, t: float) -> UnitQuaternion:
        *_, yaw, _ = self._state(t)
        return _euler_zyx_to_q_GB(0.0, 0.0, yaw)

    def body_rate(self, t: float) -> np.ndarray:
        *_, yaw_dot = self._state(t)
        return np.array([0.0, 0.0, yaw_dot])

    def pose(self, t: float) -> Pose:
        return Pose(self.orientation(t), self.position(t))


def specific_force(traj, t: float, gravity) -> np.ndarray:
    """Accelerometer truth: f = C(q_GB) (p_ddot - g)."""
    return traj.orientation(t).rotation_matrix() @ (traj.acceleration(t) - gravity)


# ---------------------------------------------------------------------------
# IMU synthesis


def synthesize_imu(traj, noise: NoiseParams, seed: int, rate_hz: float,
                   gravity, init_gyro_bias=None, init_accel_bias=None,
                   noisy: bool = True) -> list[ImuSample]:
    """IMU stream covering the trajectory.

    Each sample is stamped at the start of its interval and carries the
    midpoint rate/force of that interval, matching the zero-order-hold
    semantics of the propagation step; with noisy=False the integration
    round trip is then exact to the integrator's order.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1317]))
    dt = 1.0 / rate_hz
    n = int(round(traj.duration * rate_hz))
    bg = np.zeros(3) if init_gyro_bias is None else np.asarray(init_gyro_bias, float).copy()
    ba = np.zeros(3) if init_accel_bias is None else np.asarray(init_accel_bias, float).copy()
    gravity = np.asarray(gravity, dtype=float)
    samples = []
    sqrt_dt = math.sqrt(dt)
    for k in range(n):
        t_mid = (k + 0.5) * dt
        w = traj.body_rate(t_mid)
        f = specific_force(traj, t_mid, gravity)
        if noisy:
            w = w + bg + noise.gyro_noise_density / sqrt_dt * rng.normal(size=3)
            f = f + ba + noise.accel_noise_density / sqrt_dt * rng.normal(size=3)
            bg = bg + noise.gyro_bias_randomwalk * sqrt_dt * rng.normal(size=3)
            ba = ba + noise.accel_bias_randomwalk * sqrt_dt * rng.normal(size=3)
        else:
            w = w + bg
            f = f + ba
        samples.append(ImuSample(int(round(k * dt * 1e9)), w, f))
    return samples


# ---------------------------------------------------------------------------
# Camera model and observation synthesis


@dataclass
class CameraModel:
    """Normalized-coordinate stereo camera with field-of-view and depth culling."""
    rig: StereoRig = field(default_factory=StereoRig)
    extrinsics: ImuExtrinsics = None
    fov_tan: float = 1.0          # |u|,|v| limit, ~45 deg half angle
    min_depth: float = 0.3
    max_depth: float = 30.0

    def __post_init__(self):
        if self.extrinsics is None:
            # Camera z looks along body +x; camera x right (-y body), y down (-z body).
            R_cb = np.array([[0.0, 0.0, 1.0],
                             [-1.0, 0.0, 0.0],
                             [0.0, -1.0, 0.0]])
            self.extrinsics = ImuExtrinsics(
                q_CB=UnitQuaternion.from_rotation_matrix(R_cb), p_BC=np.zeros(3))

    def left_pose(self, body_pose: Pose) -> Pose:
        return self.extrinsics.body_to_camera().compose(body_pose)

    def project_visible(self, cam_pose: Pose, p_G) -> np.ndarray | None:
        p_c = cam_pose.transform(p_G)
        if not (self.min_depth <= p_c[2] <= self.max_depth):
            return None
        uv = p_c[:2] / p_c[2]
        if abs(uv[0]) > self.fov_tan or abs(uv[1]) > self.fov_tan:
            return None
        return uv


@dataclass
class SimFrame:
    """Everything the front-end hands the estimator for one camera frame,
    plus ground-truth labels kept aside for oracles."""
    frame_id: int
    timestamp: int
    points: list        # (track_id, landmark_id, StereoObservation, descriptor)
    lines: list         # (track_id, line_id, LineObservation)
    gt_body_pose: Pose
    outlier_track_ids: set = field(default_factory=set)
    # 4-way match maps for circular checking (None on the first frame):
    # prev_left->curr_left, curr_left->curr_right, curr_right->prev_right,
    # prev_right->prev_left.  Chain-corrupted outliers break the first map.
    match_maps: tuple | None = None


class ObservationSynthesizer:
    """Projects the world along the trajectory into per-frame stereo
    observations with noise, wrong-association outliers, and track dropout."""

    def __init__(self, world: SimWorld, traj, camera: CameraModel,
                 noise_px: float = 0.0, outlier_rate: float = 0.0,
                 dropout_rate: float = 0.0, seed: int = 0,
                 max_points_per_frame: int = 60, max_lines_per_frame: int = 30,
                 descriptor_flip_prob: float = 0.05):
        self.world = world
        self.traj = traj
        self.camera = camera
        self.noise_px = noise_px
        self.outlier_rate = outlier_rate
        self.dropout_rate = dropout_rate
        self.max_points = max_points_per_frame
        self.max_lines = max_lines_per_frame
        self.flip_prob = descriptor_flip_prob
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0B5]))
        self._next_track_id = 0
        self._active_points: dict[int, int] = {}   # landmark -> track id
        self._active_lines: dict[int, int] = {}
        self._cooldown: dict[int, int] = {}
        self._prev_point_tids: list[int] = []
        self._prev_stereo_tids: set[int] = set()
        self._point_ids = [lid for lid, _ in world.points]
        self._point_arr = (np.array([p for _, p in world.points])
                           if world.points else np.zeros((0, 3)))

    def _new_track(self) -> int:
        tid = self._next_track_id
        self._next_track_id += 1
        return tid

    def _project_all(self, cam_pose):
        """Project every world point; None entries are culled."""
        if not len(self._point_arr):
            return []
        cam = self.camera
        C = cam_pose.rotation.rotation_matrix()
        p_c = (self._point_arr - cam_pose.position) @ C.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = p_c[:, :2] / p_c[:, 2:3]
        ok = ((p_c[:, 2] >= cam.min_depth) & (p_c[:, 2] <= cam.max_depth)
              & (np.abs(uv[:, 0]) <= cam.fov_tan) & (np.abs(uv[:, 1]) <= cam.fov_tan))
        return [uv[i] if ok[i] else None for i in range(len(ok))]

    def frame(self, frame_id: int, t: float) -> SimFrame:
        rng = self._rng
        body_pose = self.traj.pose(t)
        left_pose = self.camera.left_pose(body_pose)
        right_pose = self.camera.rig.right_pose(left_pose)

        for lid in list(self._cooldown):
            self._cooldown[lid] -= 1
            if self._cooldown[lid] <= 0:
                del self._cooldown[lid]

        points = []
        outlier_tids = set()
        chain_broken = set()
        uvs_l = self._project_all(left_pose)
        uvs_r = self._project_all(right_pose)

        # Visible landmarks, tracked ones first (KLT-like continuity), hard
        # per-frame cap; features past the cap lose their track.
        visible = []
        for i, lid in enumerate(self._point_ids):
            if uvs_l[i] is None:
                self._active_points.pop(lid, None)
                continue
            if lid in self._cooldown:
                continue
            visible.append((lid, uvs_l[i], uvs_r[i]))
        visible.sort(key=lambda v: (v[0] not in self._active_points, v[0]))
        for lid, *_ in visible[self.max_points:]:
            self._active_points.pop(lid, None)
        visible = visible[:self.max_points]

        for lid, uv_l, uv_r in visible:
            tracked = lid in self._active_points
            if tracked and self.dropout_rate > 0.0 and rng.random() < self.dropout_rate:
                del self._active_points[lid]
                self._cooldown[lid] = 1
                continue
            if not tracked:
                self._active_points[lid] = self._new_track()
            tid = self._active_points[lid]
            if self.noise_px > 0.0:
                uv_l = uv_l + rng.normal(scale=self.noise_px, size=2)
                if uv_r is not None:
                    uv_r = uv_r + rng.normal(scale=self.noise_px, size=2)
            if self.outlier_rate > 0.0 and rng.random() < self.outlier_rate:
                # Wrong association: a uniform in-image point replaces the truth.
                lim = self.camera.fov_tan
                uv_l = rng.uniform(-lim, lim, size=2)
                if uv_r is not None:
                    uv_r = rng.uniform(-lim, lim, size=2)
                outlier_tids.add(tid)
                if rng.random() < 0.5:
                    chain_broken.add(tid)  # also detectable by circular matching
            obs = StereoObservation(frame_id, uv_l, uv_r)
            desc = self.world.observed_descriptor(lid, frame_id, self.flip_prob)
            points.append((tid, lid, obs, desc))

        lines = []
        visible_lines = []
        for lid, p_b, p_e in self.world.segments:
            metas = []
            ok = True
            for pose in (left_pose, right_pose):
                b = self.camera.project_visible(pose, p_b)
                e = self.camera.project_visible(pose, p_e)
                if b is None or e is None or np.linalg.norm(e - b) < 1e-3:
                    ok = False
                    break
                metas.append((b, e))
            if not ok:
                self._active_lines.pop(lid, None)
                continue
            visible_lines.append((lid, metas))
        visible_lines.sort(key=lambda v: (v[0] not in self._active_lines, v[0]))
        for lid, _ in visible_lines[self.max_lines:]:
            self._active_lines.pop(lid, None)
        visible_lines = visible_lines[:self.max_lines]

        for lid, metas in visible_lines:
            tracked = lid in self._active_lines
            if tracked and self.dropout_rate > 0.0 and rng.random() < self.dropout_rate:
                del self._active_lines[lid]
                continue
            if not tracked:
                self._active_lines[lid] = self._new_track()
            tid = self._active_lines[lid]
            views = []
            for b, e in metas:
                if self.noise_px > 0.0:
                    b = b + rng.normal(scale=self.noise_px, size=2)
                    e = e + rng.normal(scale=self.noise_px, size=2)
                d = (e - b) / np.linalg.norm(e - b)
                views.append(LineMeas(point=0.5 * (b + e),
                                      normal=np.array([-d[1], d[0]]),
                                      endpoints=np.vstack([b, e])))
            lines.append((tid, lid, LineObservation(frame_id, views[0], views[1])))

        curr_tids = [tid for tid, *_ in points]
        curr_stereo = {tid for tid, _, obs, _ in points if obs.right_uv is not None}
        match_maps = None
        if self._prev_point_tids:
            common = [tid for tid in curr_tids if tid in set(self._prev_point_tids)
                      and tid in curr_stereo and tid in self._prev_stereo_tids]
            m1 = {}
            for tid in common:
                if tid in chain_broken and len(common) > 1:
                    others = [o for o in common if o != tid]
                    m1[tid] = others[int(rng.integers(len(others)))]
                else:
                    m1[tid] = tid
            m2 = {tid: tid for tid in common}
            m3 = {tid: tid for tid in common}
            m4 = {tid: tid for tid in common}
            match_maps = (m1, m2, m3, m4)
        self._prev_point_tids = curr_tids
        self._prev_stereo_tids = curr_stereo

        return SimFrame(frame_id=frame_id, timestamp=int(round(t * 1e9)),
                        points=points, lines=lines, gt_body_pose=body_pose,
                        outlier_track_ids=outlier_tids, match_maps=match_maps)


# ---------------------------------------------------------------------------
# Correspondence-level outlier rejection


def two_point_ransac(matches, gyro_rotation: UnitQuaternion, threshold: float,
                     seed: int, confidence: float = 0.99,
                     max_iterations: int = 200) -> np.ndarray:
    """Gyro-aided 2-point RANSAC over temporal matches.

    matches: list of (uv_prev, uv_curr) in normalized coordinates.
    gyro_rotation: camera rotation prev->curr integrated from the gyro.
    Rotation is compensated with the prior, a 2-point hypothesis fixes the
    translation direction, and inliers are scored by Sampson error on the
    resulting essential matrix.  Returns a boolean inlier mask.
    """
    n = len(matches)
    if n < 2:
        raise TooFewMatches(f"2-point RANSAC needs >= 2 matches, got {n}")
    R = gyro_rotation.rotation_matrix()
    f_prev = np.ones((n, 3))
    f_curr = np.ones((n, 3))
    for i, (uv_p, uv_c) in enumerate(matches):
        f_prev[i, :2] = uv_p
        f_curr[i, :2] = uv_c
    f_prev_rot = f_prev @ R.T  # rows: R @ f_prev

    constraint = np.cross(f_curr, f_prev_rot)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2A54C]))

    def sampson_mask(t_dir):
        E = skew(t_dir)
        Ex1 = f_prev_rot @ E.T   # rows: E @ x1
        Etx2 = f_curr @ E        # rows: E^T @ x2
        num = np.einsum("ij,ij->i", f_curr, Ex1) ** 2
        den = (Ex1[:, 0] ** 2 + Ex1[:, 1] ** 2 + Etx2[:, 0] ** 2 + Etx2[:, 1] ** 2)
        den = np.maximum(den, 1e-12)
        return num / den < threshold ** 2

    best_mask = None
    best_count = -1
    needed = max_iterations
    it = 0
    while it < needed and it < max_iterations:
        i, j = rng.choice(n, size=2, replace=False)
        t_dir = np.cross(constraint[i], constraint[j])
        norm = np.linalg.norm(t_dir)
        if norm < 1e-9:
            # Degenerate pair (e.g. pure rotation): any unit vector scores it.
            t_dir = np.array([1.0, 0.0, 0.0])
        else:
            t_dir = t_dir / norm
        mask = sampson_mask(t_dir)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = max(count / n, 1e-3)
            needed = min(max_iterations,
                         int(math.log(max(1e-12, 1.0 - confidence))
                             / math.log(max(1e-12, 1.0 - w * w))) + 1)
        it += 1
    return best_mask if best_mask is not None else np.zeros(n, dtype=bool)


def circular_check(prev_left_to_curr_left: dict, curr_left_to_curr_right: dict,
                   curr_right_to_prev_right: dict, prev_right_to_prev_left: dict) -> dict:
    """4-way consistency: a correspondence survives iff the chain
    prev_left -> curr_left -> curr_right -> prev_right -> prev_left closes.

    Returns {prev_left_id: bool}."""
    out = {}
    for start, cl in prev_left_to_curr_left.items():
        cr = curr_left_to_curr_right.get(cl)
        pr = curr_right_to_prev_right.get(cr) if cr is not None else None
        back = prev_right_to_prev_left.get(pr) if pr is not None else None
        out[start] = back == start
    return out


# ---------------------------------------------------------------------------
# Brightness check and histogram matching


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, flattened or 2D

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.uint8)
        if arr.size != self.width * self.height:
            raise DimensionMismatch("pixel count does not match dimensions")
        self.pixels = arr.reshape(self.height, self.width)

    def mean(self) -> float:
        return float(self.pixels.mean())


def brightness_check_and_match(ref: GrayImage, target: GrayImage,
                               mean_gap_threshold: float = 10.0) -> GrayImage:
    """Return target untouched when mean brightnesses agree; otherwise remap
    target so its histogram exactly matches the reference's.

    The remap is rank-based (exact quantile matching): target pixels sorted by
    value take the reference's sorted values position by position.  Matching a
    second time is then the identity, so the operation is idempotent.
    """
    if (ref.width, ref.height) != (target.width, target.height):
        raise DimensionMismatch("images differ in size")
    if abs(ref.mean() - target.mean()) <= mean_gap_threshold:
        return target
    flat_t = target.pixels.ravel()
    flat_r = ref.pixels.ravel()
    order = np.argsort(flat_t, kind="stable")
    matched = np.empty_like(flat_t)
    matched[order] = np.sort(flat_r)
    return GrayImage(target.width, target.height, matched.reshape(target.pixels.shape))
