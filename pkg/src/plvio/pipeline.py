"""End-to-end estimation pipeline.

Per camera frame: propagate over the buffered IMU samples, prune the window
if full (consuming observations of pruned clones in a final update and
archiving pending keyframes), augment a clone, ingest observations through
the correspondence-level outlier rejection, run the joint point/line update
for terminated tracks, then keyframe selection, loop detection, and
loop-closure updates.  Synchronous loop detection makes a run a pure
function of (config, seed).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .errors import (
    AllGated,
    BehindCamera,
    DegenerateLine,
    DivergedTriangulation,
    InsufficientBaseline,
    InsufficientViews,
    NegativeDepth,
    RankDeficient,
    SingularInnovation,
    TooFewMatches,
)
from .frontend_sim import (
    ObservationSynthesizer,
    SimWorld,
    circular_check,
    synthesize_imu,
    two_point_ransac,
)
from .geom import Pose, UnitQuaternion, quat_multiply
from .io import TrajectorySample
from .line_meas import LineTrack, line_jacobians, line_residual, marginalize_line, triangulate_line
from .loopdet import (
    KeyframeDatabase,
    KeyframeFeature,
    KeyframeRecord,
    LoopDetector,
    select_keyframe,
)
from .point_meas import PointTrack, marginalize_feature, point_residual_jacobian, triangulate
from .propagation import full_unobservable_basis, oc_fix, propagate
from .state import FilterState, ImuState, augment_clone, inject_error, prune_clones
from .update import LoopMatch, chi2_gate, compress, ekf_update, loop_closure_update


@dataclass
class FrameLog:
    frame_id: int
    timestamp: int
    est_body_pose: Pose
    gt_body_pose: Pose | None
    pose_cov: np.ndarray          # 6x6 [dtheta, dp] marginal of the IMU pose
    loop_applied: bool
    update_seconds: float
    tracked_points: int


@dataclass
class RunResult:
    config: RunConfig
    samples: list                 # estimated body trajectory
    gt_samples: list              # ground-truth body trajectory (sim mode)
    frame_logs: list
    database: KeyframeDatabase
    states: FilterState | None = None  # final filter state
    # Worst |A^T H_f| (points) and |A^T H_l| (lines) seen over the whole run.
    max_nullspace_residual_points: float = 0.0
    max_nullspace_residual_lines: float = 0.0


class Pipeline:
    def __init__(self, cfg: RunConfig, imu_samples=None, frames=None,
                 gt_samples=None):
        """Inline simulation when imu_samples/frames are None; otherwise runs
        from ingested streams (frames: io.FrameBundle list)."""
        self.cfg = cfg
        self.update_cfg = cfg.update_config()
        self.loop_cfg = cfg.loop_detection_config()
        self.tri_cfg = cfg.triangulation_config()
        self.camera = cfg.camera_model()
        self.rig = self.camera.rig
        self.noise = cfg.noise_params()
        self.gravity = np.array([0.0, 0.0, -9.81])

        ratio = cfg.imu_rate_hz / cfg.camera_rate_hz
        if abs(ratio - round(ratio)) > 1e-9 or ratio < 2:
            raise ValueError("imu_rate_hz must be an integer multiple (>= 2x) "
                             "of camera_rate_hz")
        self.imu_per_frame = int(round(ratio))
        self.dt_imu = 1.0 / cfg.imu_rate_hz

        self._inline = imu_samples is None
        if self._inline:
            self.traj = cfg.make_trajectory()
            self.world = SimWorld.generate(
                seed=cfg.seed, n_points=cfg.n_world_points,
                n_segments=cfg.n_world_segments, radius=cfg.world_radius,
                center=self._world_center())
            self.imu_samples = synthesize_imu(
                self.traj, self.noise, cfg.seed, cfg.imu_rate_hz, self.gravity,
                init_gyro_bias=cfg.init_gyro_bias,
                init_accel_bias=cfg.init_accel_bias, noisy=cfg.imu_noisy)
            self.synth = ObservationSynthesizer(
                self.world, self.traj, self.camera, noise_px=cfg.pixel_sigma,
                outlier_rate=cfg.outlier_rate, dropout_rate=cfg.dropout_rate,
                seed=cfg.seed, max_points_per_frame=cfg.max_points_per_frame,
                max_lines_per_frame=cfg.max_lines_per_frame,
                descriptor_flip_prob=cfg.descriptor_flip_prob)
            self.n_frames = int(round(self.traj.duration * cfg.camera_rate_hz))
            self.frames = None
            self.gt_for_init = None
        else:
            self.traj = None
            self.world = None
            self.imu_samples = list(imu_samples)
            self.synth = None
            self.frames = {fr.frame_id: fr for fr in frames}
            self.n_frames = (max(self.frames) + 1) if self.frames else 0
            self.gt_for_init = gt_samples

        self.db = KeyframeDatabase(cfg.max_keyframes)
        self.detector = LoopDetector(self.db, self.loop_cfg,
                                     synchronous=cfg.sync_loop_detection)
        self._null_resid_points = 0.0
        self._null_resid_lines = 0.0

    def _world_center(self):
        if self.cfg.trajectory == "square":
            return self.cfg.make_trajectory().center()
        return np.asarray(self.cfg.traj_center, dtype=float)

    # -- initialization -------------------------------------------------------

    def _initial_state(self) -> FilterState:
        cfg = self.cfg
        if self._inline:
            imu = ImuState(q_GB=self.traj.orientation(0.0),
                           v_GB=self.traj.velocity(0.0),
                           p_GB=self.traj.position(0.0))
        elif self.gt_for_init:
            first = self.gt_for_init[0]
            v0 = np.zeros(3)
            if len(self.gt_for_init) >= 2:
                nxt = self.gt_for_init[1]
                dt = (nxt.timestamp - first.timestamp) / 1e9
                if dt > 0:
                    v0 = (nxt.pose.position - first.pose.position) / dt
            imu = ImuState(q_GB=first.pose.rotation, v_GB=v0,
                           p_GB=first.pose.position)
        else:
            imu = ImuState()
        imu.extrinsics = self.camera.extrinsics
        st = FilterState(imu, gravity=self.gravity,
                         estimate_extrinsics=cfg.estimate_extrinsics,
                         max_clones=cfg.window_size)
        sig = np.concatenate([
            np.full(3, cfg.init_sigma_theta), np.full(3, cfg.init_sigma_bg),
            np.full(3, cfg.init_sigma_v), np.full(3, cfg.init_sigma_ba),
            np.full(3, cfg.init_sigma_p)])
        if cfg.estimate_extrinsics:
            sig = np.concatenate([sig, np.full(6, 1e-3)])
        st.cov = np.diag(sig ** 2)
        if cfg.init_perturb:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x171]))
            inject_error(st, sig * rng.normal(size=sig.size))
        return st

    # -- update block assembly ------------------------------------------------

    def _oc_and_gate(self, state, block):
        if self.cfg.enable_oc:
            N = full_unobservable_basis(state)
            _, H_star = oc_fix(H=block.H_X, nullspace=N)
            block.H_X = H_star
        try:
            return chi2_gate(block, state.cov, self.update_cfg)
        except SingularInnovation:
            return False

    def _point_blocks(self, state, tracks):
        blocks = []
        for track in tracks:
            if not track.observations:
                continue
            try:
                p_G = triangulate(track, state, self.rig, self.tri_cfg)
                r, H_X, H_f = point_residual_jacobian(track, p_G, state, self.rig)
                block = marginalize_feature(r, H_X, H_f, self.update_cfg.sigma_point)
            except (InsufficientBaseline, DivergedTriangulation, NegativeDepth,
                    BehindCamera, RankDeficient, KeyError):
                continue
            self._null_resid_points = max(self._null_resid_points,
                                          block.nullspace_residual)
            if self._oc_and_gate(state, block):
                blocks.append(block)
        return blocks

    def _line_blocks(self, state, tracks):
        blocks = []
        for track in tracks:
            if len(track.observations) < 2:
                continue
            try:
                L_G = triangulate_line(track, state, self.rig)
                rows_r, rows_HX, rows_Hl = [], [], []
                for obs in track.observations:
                    idx = state.clone_index(obs.frame_id)
                    rows_r.append(line_residual(obs, L_G, state.clones[idx].pose,
                                                self.rig))
                    H_X, H_l = line_jacobians(obs, L_G, state, idx, self.rig)
                    rows_HX.append(H_X)
                    rows_Hl.append(H_l)
                block = marginalize_line(np.concatenate(rows_r),
                                         np.vstack(rows_HX), np.vstack(rows_Hl),
                                         self.update_cfg.sigma_line)
            except (DegenerateLine, InsufficientViews, BehindCamera,
                    RankDeficient, KeyError):
                continue
            self._null_resid_lines = max(self._null_resid_lines,
                                         block.nullspace_residual)
            if self._oc_and_gate(state, block):
                blocks.append(block)
        return blocks

    def _apply_blocks(self, state, blocks):
        if not blocks:
            return
        # Bound stacked rows: fold into intermediate compressed blocks.
        staged = []
        rows = 0
        pending = []
        for b in blocks:
            pending.append(b)
            rows += b.rows
            if rows > self.update_cfg.max_stacked_rows:
                staged.append(compress(pending))
                pending, rows = [], 0
        if pending:
            staged.append(compress(pending))
        try:
            ekf_update(state, compress(staged))
        except SingularInnovation:
            pass

    # -- track restriction helpers --------------------------------------------

    @staticmethod
    def _restrict_point_track(track, frame_ids):
        sub = PointTrack(track.track_id)
        for obs in track.observations:
            if obs.frame_id in frame_ids:
                sub.add(obs)
        return sub

    @staticmethod
    def _restrict_line_track(track, frame_ids):
        sub = LineTrack(track.line_id)
        for obs in track.observations:
            if obs.frame_id in frame_ids:
                sub.add(obs)
        return sub

    @staticmethod
    def _drop_frames_from_track(track, frame_ids):
        track.observations = [o for o in track.observations
                              if o.frame_id not in frame_ids]

    # -- main loop --------------------------------------------------------------

    def run(self) -> RunResult:
        cfg = self.cfg
        state = self._initial_state()
        cam_dt = 1.0 / cfg.camera_rate_hz

        active_points: dict[int, PointTrack] = {}
        active_lines: dict[int, LineTrack] = {}
        prev_frame_uv: dict[int, np.ndarray] = {}
        pending_keyframes: dict[int, list] = {}
        kf_feature_tids: set[int] = set()
        kf_position_cache: dict[int, np.ndarray] = {}
        active_loop: dict[int, np.ndarray] = {}
        # Tracks consumed by loop-closure updates: their observations must not
        # be reused by the regular feature update (no double counting).
        loop_used_tids: set[int] = set()

        est_samples, gt_samples, frame_logs = [], [], []

        for k in range(self.n_frames):
            t = k * cam_dt
            ts = int(round(t * 1e9))
            loop_applied = False

            # 1. Propagate through the IMU samples covering (t_prev, t].
            q_cam_prev = (state.clones[-1].pose.rotation if state.clones
                          else state.imu.camera_pose().rotation)
            if k > 0:
                lo, hi = (k - 1) * self.imu_per_frame, k * self.imu_per_frame
                for s in self.imu_samples[lo:hi]:
                    propagate(state, s, self.dt_imu, self.noise,
                              enable_oc=cfg.enable_oc)
            gyro_prior = quat_multiply(state.imu.camera_pose().rotation,
                                       q_cam_prev.inverse())

            t_update = time.perf_counter()

            # 2. Prune when the window is full, consuming pruned observations.
            if len(state.clones) >= cfg.window_size:
                if cfg.prune_policy == "evenly_spaced":
                    half = max(1, len(state.clones) // 2)
                    prune_ids = {state.clones[i].frame_id for i in range(0, half, 2)}
                else:
                    prune_ids = {state.clones[0].frame_id}
                update_blocks = []
                if cfg.enable_points:
                    subs = [self._restrict_point_track(tr, prune_ids)
                            for tid, tr in active_points.items()
                            if tid not in loop_used_tids]
                    update_blocks += self._point_blocks(
                        state, [s for s in subs if len(s.observations) > 0])
                if cfg.enable_lines:
                    subs = [self._restrict_line_track(tr, prune_ids)
                            for tr in active_lines.values()]
                    update_blocks += self._line_blocks(
                        state, [s for s in subs if len(s.observations) >= 2])
                self._apply_blocks(state, update_blocks)
                # Archive pending keyframes whose clone is leaving the window.
                for fid in sorted(prune_ids):
                    if fid in pending_keyframes:
                        self._archive_keyframe(state, fid,
                                               pending_keyframes.pop(fid),
                                               active_points, kf_position_cache)
                kf_feature_tids = {tid for feats in pending_keyframes.values()
                                   for tid, _, _ in feats}
                for tid in list(kf_position_cache):
                    if tid not in kf_feature_tids:
                        del kf_position_cache[tid]
                for tr in active_points.values():
                    self._drop_frames_from_track(tr, prune_ids)
                for tr in active_lines.values():
                    self._drop_frames_from_track(tr, prune_ids)
                count = len(prune_ids) if cfg.prune_policy != "evenly_spaced" else None
                prune_clones(state, cfg.prune_policy, count)

            # 3. Clone the current camera pose.
            augment_clone(state, timestamp=ts, frame_id=k)

            # 4. Ingest observations.
            frame = self.synth.frame(k, t) if self._inline else self.frames.get(k)
            point_entries, line_entries, descriptors = [], [], {}
            if frame is not None:
                if self._inline:
                    point_entries = [(tid, obs, desc)
                                     for tid, _, obs, desc in frame.points]
                    line_entries = [(tid, obs) for tid, _, obs in frame.lines]
                else:
                    point_entries = [(tid, obs, frame.descriptors.get(tid))
                                     for tid, obs in frame.points]
                    line_entries = list(frame.lines)

            if (cfg.use_circular_check and frame is not None
                    and getattr(frame, "match_maps", None)):
                survivors = circular_check(*frame.match_maps)
                point_entries = [(tid, obs, d) for tid, obs, d in point_entries
                                 if survivors.get(tid, True)]

            if cfg.use_two_point_ransac and point_entries and prev_frame_uv:
                pairs = [(tid, prev_frame_uv[tid], obs.left_uv)
                         for tid, obs, _ in point_entries if tid in prev_frame_uv]
                if len(pairs) >= 5:
                    try:
                        mask = two_point_ransac(
                            [(p, c) for _, p, c in pairs], gyro_prior,
                            cfg.ransac_threshold, seed=cfg.seed * 2654435761 + k)
                        rejected = {pairs[i][0] for i in range(len(pairs))
                                    if not mask[i]}
                        point_entries = [(tid, obs, d) for tid, obs, d
                                         in point_entries if tid not in rejected]
                    except TooFewMatches:
                        pass

            prev_frame_uv = {tid: obs.left_uv for tid, obs, _ in point_entries}

            seen_points = set()
            for tid, obs, desc in point_entries:
                if tid not in active_points:
                    active_points[tid] = PointTrack(tid)
                active_points[tid].add(obs)
                if desc is not None:
                    descriptors[tid] = desc
                seen_points.add(tid)
            seen_lines = set()
            for tid, obs in line_entries:
                if tid not in active_lines:
                    active_lines[tid] = LineTrack(tid)
                active_lines[tid].add(obs)
                seen_lines.add(tid)

            # 5. Updates for terminated tracks.
            dead_points = [tid for tid in active_points if tid not in seen_points]
            dead_lines = [tid for tid in active_lines if tid not in seen_lines]
            blocks = []
            if cfg.enable_points:
                ready = [active_points[tid] for tid in dead_points
                         if tid not in loop_used_tids
                         and len(active_points[tid].observations) >= cfg.min_track_frames]
                blocks += self._point_blocks(state, ready)
            if cfg.enable_lines:
                ready = [active_lines[tid] for tid in dead_lines
                         if len(active_lines[tid].observations) >= 2]
                blocks += self._line_blocks(state, ready)
            self._apply_blocks(state, blocks)
            for tid in dead_points:
                # Keyframe features whose track ends before the keyframe is
                # marginalized: fix their 3D position now, while the observing
                # clones are still in the window.
                if tid in kf_feature_tids and active_points[tid].observations:
                    try:
                        kf_position_cache[tid] = triangulate(
                            active_points[tid], state, self.rig, self.tri_cfg)
                    except Exception:
                        pass
                del active_points[tid]
                active_loop.pop(tid, None)
                loop_used_tids.discard(tid)
            for tid in dead_lines:
                del active_lines[tid]

            # 6. Loop closure.
            if cfg.enable_loop_closure:
                if active_loop:
                    matches, used = [], []
                    for tid, obs, _ in point_entries:
                        if tid in active_loop:
                            matches.append(LoopMatch(active_loop[tid], obs))
                            used.append(tid)
                    if len(matches) >= cfg.loop_min_live_tracks:
                        try:
                            loop_closure_update(state, matches, self.update_cfg,
                                                self.rig)
                            loop_applied = True
                            loop_used_tids.update(used)
                        except AllGated:
                            active_loop.clear()
                    else:
                        active_loop.clear()

                cam_pose = state.clones[-1].pose
                if descriptors and select_keyframe(cam_pose, len(seen_points),
                                                   self.db, self.loop_cfg):
                    feats = [(tid, descriptors[tid],
                              np.array(active_points[tid].observations[-1].left_uv))
                             for tid in sorted(descriptors)]
                    pending_keyframes[k] = feats
                    kf_feature_tids.update(tid for tid, _, _ in feats)
                    query = KeyframeRecord(k, cam_pose, [
                        KeyframeFeature(tid, d, uv, np.zeros(3))
                        for tid, d, uv in feats])
                    self.detector.submit(query)

                for qid, cand in self.detector.poll():
                    # One-camera-frame delivery deadline; stale results dropped.
                    if qid < k - 1 or cand is None:
                        continue
                    live = {tid: p for tid, p in cand.track_map.items()
                            if tid in active_points}
                    if len(live) >= cfg.loop_min_live_tracks:
                        active_loop = live

            update_seconds = time.perf_counter() - t_update

            # 7. Record.
            body_pose = state.imu.pose()
            idx = np.r_[0:3, 12:15]
            est_samples.append(TrajectorySample(ts, body_pose))
            gt_pose = frame.gt_body_pose if (frame is not None and self._inline) else None
            if gt_pose is not None:
                gt_samples.append(TrajectorySample(ts, gt_pose))
            frame_logs.append(FrameLog(
                frame_id=k, timestamp=ts, est_body_pose=body_pose,
                gt_body_pose=gt_pose,
                pose_cov=state.cov[np.ix_(idx, idx)].copy(),
                loop_applied=loop_applied, update_seconds=update_seconds,
                tracked_points=len(seen_points)))

        self.detector.close()
        return RunResult(config=cfg, samples=est_samples, gt_samples=gt_samples,
                         frame_logs=frame_logs, database=self.db, states=state,
                         max_nullspace_residual_points=self._null_resid_points,
                         max_nullspace_residual_lines=self._null_resid_lines)

    def _archive_keyframe(self, state, frame_id, feats, active_points,
                          position_cache):
        """Store the keyframe in the database as it leaves the window, with
        feature positions triangulated from the live track where possible and
        from the termination-time cache otherwise."""
        try:
            pose = state.clone_by_frame(frame_id).pose
        except KeyError:
            return
        records = []
        for tid, desc, uv in feats:
            p_G = None
            track = active_points.get(tid)
            if track is not None and track.observations:
                try:
                    p_G = triangulate(track, state, self.rig, self.tri_cfg)
                except Exception:
                    p_G = None
            if p_G is None:
                p_G = position_cache.get(tid)
            if p_G is None:
                continue
            records.append(KeyframeFeature(tid, desc, uv, p_G))
        if len(records) >= self.loop_cfg.min_loop_inliers:
            try:
                self.db.insert(KeyframeRecord(frame_id, pose, records))
            except Exception:
                pass


def run_pipeline(cfg: RunConfig, imu_samples=None, frames=None,
                 gt_samples=None) -> RunResult:
    """Convenience wrapper: build a Pipeline and run it."""
    return Pipeline(cfg, imu_samples=imu_samples, frames=frames,
                    gt_samples=gt_samples).run()
