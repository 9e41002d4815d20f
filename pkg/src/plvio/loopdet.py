"""Keyframe selection, keyframe database, and loop detection.

Keyframes are selected on feature count and pose novelty.  When a keyframe's
clone is marginalized from the window, its pose, per-feature descriptors, 2D
positions, and triangulated 3D positions enter the database.  Loop detection
matches binary descriptors (Hamming distance with a ratio test) against a
past keyframe and verifies the candidate geometrically in two steps, both
RANSAC: a 2D-2D fundamental-matrix test, then a 3D-2D PnP test on the stored
map points.  Surviving matches feed the loop-closure EKF update.

Detection can run synchronously (deterministic, used in tests and the
default pipeline mode) or on a worker thread with message queues.
"""

from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicateFrameId, ParseError
from .geom import Pose, UnitQuaternion, quat_multiply, skew, small_angle_quat
from .point_meas import StereoObservation, projection_jacobian
from .update import LoopMatch


@dataclass
class KeyframeFeature:
    track_id: int
    descriptor: bytes
    uv: np.ndarray       # left-camera normalized coordinates
    p_G: np.ndarray      # triangulated position, keyframe era

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float)
        self.p_G = np.asarray(self.p_G, dtype=float)


@dataclass
class KeyframeRecord:
    frame_id: int
    pose: Pose           # left-camera pose at marginalization time
    features: list

    def __post_init__(self):
        lengths = {len(f.descriptor) for f in self.features}
        if lengths and lengths != {32}:
            raise ValueError("descriptors must be 256-bit (32 bytes)")


@dataclass
class LoopCandidate:
    query_frame_id: int
    match_frame_id: int
    matches: list               # LoopMatch entries (verified inliers)
    inlier_count: int
    pnp_pose: Pose
    track_map: dict = field(default_factory=dict)  # query track_id -> p_map


@dataclass
class LoopConfig:
    min_tracked: int = 10
    keyframe_distance: float = 0.3          # meters
    keyframe_angle: float = math.radians(15.0)
    max_keyframes: int = 500
    exclusion_window: int = 30
    min_candidate_matches: int = 12
    min_loop_inliers: int = 20
    hamming_max: int = 64
    ratio_test: float = 0.8
    fm_threshold: float = 0.01
    pnp_threshold: float = 0.01
    ransac_confidence: float = 0.99
    ransac_max_iterations: int = 300
    seed: int = 0


class KeyframeDatabase:
    """Insertion-ordered store of marginalized keyframes, oldest evicted."""

    def __init__(self, max_keyframes: int = 500):
        self.max_keyframes = int(max_keyframes)
        self._records: dict[int, KeyframeRecord] = {}

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, frame_id: int) -> bool:
        return frame_id in self._records

    def get(self, frame_id: int) -> KeyframeRecord:
        return self._records[frame_id]

    def records(self) -> list[KeyframeRecord]:
        return list(self._records.values())

    def insert(self, record: KeyframeRecord) -> None:
        if record.frame_id in self._records:
            raise DuplicateFrameId(f"keyframe {record.frame_id} already stored")
        self._records[record.frame_id] = record
        while len(self._records) > self.max_keyframes:
            oldest = next(iter(self._records))
            del self._records[oldest]

    def poses(self) -> list[Pose]:
        return [r.pose for r in self._records.values()]

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        """Text dump: KF lines carry pose, FT lines the features (hex descriptor)."""
        def fmt(*vals):
            return " ".join(repr(float(v)) for v in vals)

        with open(path, "w") as fh:
            for rec in self._records.values():
                q = rec.pose.rotation.xyzw
                p = rec.pose.position
                fh.write(f"KF {rec.frame_id} {fmt(*p, *q)}\n")
                for f in rec.features:
                    fh.write(f"FT {f.track_id} {fmt(*f.uv, *f.p_G)} "
                             f"{f.descriptor.hex()}\n")

    @classmethod
    def load(cls, path, max_keyframes: int = 500) -> "KeyframeDatabase":
        db = cls(max_keyframes)
        current = None
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "KF":
                    if current is not None:
                        db.insert(current)
                    fid = int(parts[1])
                    vals = [float(x) for x in parts[2:9]]
                    pose = Pose(UnitQuaternion.from_xyzw(vals[3:7]), vals[0:3])
                    current = KeyframeRecord(fid, pose, [])
                elif parts[0] == "FT":
                    if current is None:
                        raise ParseError("FT before any KF", path=str(path), line=lineno)
                    if len(parts) != 8:
                        raise ParseError("FT record needs 7 fields",
                                         path=str(path), line=lineno)
                    current.features.append(KeyframeFeature(
                        int(parts[1]), bytes.fromhex(parts[7]),
                        [float(parts[2]), float(parts[3])],
                        [float(parts[4]), float(parts[5]), float(parts[6])]))
                else:
                    raise ParseError(f"unknown record {parts[0]!r}",
                                     path=str(path), line=lineno)
        if current is not None:
            db.insert(current)
        return db


def select_keyframe(pose: Pose, tracked_count: int, db: KeyframeDatabase,
                    cfg: LoopConfig) -> bool:
    """Keyframe when enough features are tracked and no stored keyframe is
    close in both translation and rotation."""
    if tracked_count < cfg.min_tracked:
        return False
    for other in db.poses():
        if (pose.distance_to(other) <= cfg.keyframe_distance
                and pose.angle_to(other) <= cfg.keyframe_angle):
            return False
    return True


# ---------------------------------------------------------------------------
# Geometric verification


def _normalize_points(pts: np.ndarray):
    mean = pts.mean(axis=0)
    centered = pts - mean
    scale = math.sqrt(2.0) / max(1e-12, np.mean(np.linalg.norm(centered, axis=1)))
    T = np.array([[scale, 0.0, -scale * mean[0]],
                  [0.0, scale, -scale * mean[1]],
                  [0.0, 0.0, 1.0]])
    return centered * scale, T


def _eight_point(uv1: np.ndarray, uv2: np.ndarray) -> np.ndarray:
    n1, T1 = _normalize_points(uv1)
    n2, T2 = _normalize_points(uv2)
    A = np.column_stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ])
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    U, s, Vt2 = np.linalg.svd(F)
    F = U @ np.diag([s[0], s[1], 0.0]) @ Vt2  # enforce rank 2
    return T2.T @ F @ T1


def _sampson_errors(F: np.ndarray, uv1: np.ndarray, uv2: np.ndarray) -> np.ndarray:
    x1 = np.column_stack([uv1, np.ones(len(uv1))])
    x2 = np.column_stack([uv2, np.ones(len(uv2))])
    Fx1 = x1 @ F.T
    Ftx2 = x2 @ F
    num = np.einsum("ij,ij->i", x2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    return num / np.maximum(den, 1e-12)


def fundamental_ransac(uv1: np.ndarray, uv2: np.ndarray, threshold: float,
                       confidence: float, max_iterations: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Normalized 8-point fundamental-matrix RANSAC; returns inlier mask."""
    n = len(uv1)
    if n < 8:
        return np.zeros(n, dtype=bool)
    best_mask = np.zeros(n, dtype=bool)
    needed = max_iterations
    it = 0
    while it < needed and it < max_iterations:
        sample = rng.choice(n, size=8, replace=False)
        try:
            F = _eight_point(uv1[sample], uv2[sample])
        except np.linalg.LinAlgError:
            it += 1
            continue
        mask = _sampson_errors(F, uv1, uv2) < threshold ** 2
        if mask.sum() > best_mask.sum():
            best_mask = mask
            w = max(mask.sum() / n, 1e-3)
            needed = min(max_iterations,
                         int(math.log(max(1e-12, 1.0 - confidence))
                             / math.log(max(1e-12, 1.0 - w ** 8))) + 1)
        it += 1
    if best_mask.sum() >= 8:
        F = _eight_point(uv1[best_mask], uv2[best_mask])
        best_mask = _sampson_errors(F, uv1, uv2) < threshold ** 2
    return best_mask


def _pnp_dlt(points: np.ndarray, uvs: np.ndarray) -> Pose:
    """Direct linear transform camera pose from >= 6 3D-2D correspondences.

    The projection convention is x_cam = C (X - p), i.e. P = [C | -C p]."""
    n = len(points)
    A = np.zeros((2 * n, 12))
    for i, (X, uv) in enumerate(zip(points, uvs)):
        Xh = np.array([X[0], X[1], X[2], 1.0])
        A[2 * i, 0:4] = Xh
        A[2 * i, 8:12] = -uv[0] * Xh
        A[2 * i + 1, 4:8] = Xh
        A[2 * i + 1, 8:12] = -uv[1] * Xh
    _, _, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4)
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, s, Vt2 = np.linalg.svd(M)
    C = U @ Vt2
    scale = float(np.mean(s))
    t = P[:, 3] / scale
    position = -C.T @ t
    return Pose(UnitQuaternion.from_rotation_matrix(C), position)


def _pnp_refine(pose: Pose, points: np.ndarray, uvs: np.ndarray,
                iterations: int = 6) -> Pose:
    """Gauss-Newton on the reprojection error over the 6-DOF pose."""
    for _ in range(iterations):
        C = pose.rotation.rotation_matrix()
        J = np.zeros((2 * len(points), 6))
        r = np.zeros(2 * len(points))
        for i, (X, uv) in enumerate(zip(points, uvs)):
            p_c = C @ (X - pose.position)
            if p_c[2] <= 1e-6:
                continue
            Jp = projection_jacobian(p_c)
            J[2 * i:2 * i + 2, 0:3] = Jp @ skew(p_c)
            J[2 * i:2 * i + 2, 3:6] = -Jp @ C
            r[2 * i:2 * i + 2] = uv - p_c[:2] / p_c[2]
        dx, *_ = np.linalg.lstsq(J, r, rcond=None)
        pose = Pose(quat_multiply(small_angle_quat(dx[0:3]), pose.rotation),
                    pose.position + dx[3:6])
        if np.linalg.norm(dx) < 1e-10:
            break
    return pose


def _reprojection_errors(pose: Pose, points: np.ndarray, uvs: np.ndarray) -> np.ndarray:
    C = pose.rotation.rotation_matrix()
    p_c = (points - pose.position) @ C.T
    errs = np.full(len(points), np.inf)
    ok = p_c[:, 2] > 1e-6
    proj = p_c[ok, :2] / p_c[ok, 2:3]
    errs[ok] = np.linalg.norm(proj - uvs[ok], axis=1)
    return errs


def pnp_ransac(points: np.ndarray, uvs: np.ndarray, threshold: float,
               confidence: float, max_iterations: int,
               rng: np.random.Generator):
    """6-point DLT hypotheses refined by Gauss-Newton; returns (pose, mask)."""
    n = len(points)
    if n < 6:
        return None, np.zeros(n, dtype=bool)
    best_mask = np.zeros(n, dtype=bool)
    best_pose = None
    needed = max_iterations
    it = 0
    while it < needed and it < max_iterations:
        sample = rng.choice(n, size=6, replace=False)
        try:
            pose = _pnp_dlt(points[sample], uvs[sample])
        except np.linalg.LinAlgError:
            it += 1
            continue
        mask = _reprojection_errors(pose, points, uvs) < threshold
        if mask.sum() > best_mask.sum():
            best_mask = mask
            best_pose = pose
            w = max(mask.sum() / n, 1e-3)
            needed = min(max_iterations,
                         int(math.log(max(1e-12, 1.0 - confidence))
                             / math.log(max(1e-12, 1.0 - w ** 6))) + 1)
        it += 1
    if best_pose is None or best_mask.sum() < 6:
        return None, np.zeros(n, dtype=bool)
    refined = _pnp_refine(best_pose, points[best_mask], uvs[best_mask])
    mask = _reprojection_errors(refined, points, uvs) < threshold
    if mask.sum() >= 6:
        refined = _pnp_refine(refined, points[mask], uvs[mask])
        mask = _reprojection_errors(refined, points, uvs) < threshold
    return refined, mask


# ---------------------------------------------------------------------------
# Detection


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


def _descriptor_matrix(record: KeyframeRecord) -> np.ndarray:
    """Cached (n_features, 32) uint8 view of a record's descriptors."""
    mat = getattr(record, "_desc_matrix", None)
    if mat is None or mat.shape[0] != len(record.features):
        mat = np.frombuffer(b"".join(f.descriptor for f in record.features),
                            dtype=np.uint8).reshape(len(record.features), -1)
        record._desc_matrix = mat
    return mat


def _match_descriptors(query: KeyframeRecord, record: KeyframeRecord,
                       cfg: LoopConfig):
    """Hamming matching with a best/second-best ratio test."""
    if not query.features or not record.features:
        return []
    q = _descriptor_matrix(query)
    r = _descriptor_matrix(record)
    dist = _POPCOUNT[q[:, None, :] ^ r[None, :, :]].sum(axis=2)
    pairs = []
    for i in range(dist.shape[0]):
        row = dist[i]
        best_j = int(np.argmin(row))
        best = int(row[best_j])
        if best > cfg.hamming_max:
            continue
        if row.size > 1:
            second = int(np.partition(row, 1)[1])
            if best >= cfg.ratio_test * second:
                continue
        pairs.append((query.features[i], record.features[best_j]))
    return pairs


def detect_loop(query: KeyframeRecord, db: KeyframeDatabase,
                cfg: LoopConfig) -> LoopCandidate | None:
    """Descriptor retrieval, then fundamental-matrix RANSAC, then PnP RANSAC.

    The most recent cfg.exclusion_window database entries are skipped so a
    keyframe can never loop against its own recent past.  Returns None when
    no candidate reaches cfg.min_loop_inliers verified matches."""
    records = db.records()
    if cfg.exclusion_window > 0:
        records = records[:-cfg.exclusion_window] if len(records) > cfg.exclusion_window else []
    best_pairs, best_record = [], None
    for record in records:
        if record.frame_id == query.frame_id:
            continue
        pairs = _match_descriptors(query, record, cfg)
        if len(pairs) > len(best_pairs):
            best_pairs, best_record = pairs, record
    if best_record is None or len(best_pairs) < cfg.min_candidate_matches:
        return None

    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.seed, 0x100D, query.frame_id, best_record.frame_id]))

    uv_query = np.array([qf.uv for qf, _ in best_pairs])
    uv_db = np.array([rf.uv for _, rf in best_pairs])
    p_db = np.array([rf.p_G for _, rf in best_pairs])

    fm_mask = fundamental_ransac(uv_db, uv_query, cfg.fm_threshold,
                                 cfg.ransac_confidence, cfg.ransac_max_iterations, rng)
    if fm_mask.sum() < 6:
        return None

    pose, pnp_mask = pnp_ransac(p_db[fm_mask], uv_query[fm_mask], cfg.pnp_threshold,
                                cfg.ransac_confidence, cfg.ransac_max_iterations, rng)
    if pose is None:
        return None
    inliers = int(pnp_mask.sum())
    if inliers < cfg.min_loop_inliers:
        return None

    kept = np.flatnonzero(fm_mask)[pnp_mask]
    matches, track_map = [], {}
    for idx in kept:
        qf, rf = best_pairs[idx]
        obs = StereoObservation(query.frame_id, qf.uv, None)
        matches.append(LoopMatch(rf.p_G, obs))
        track_map[qf.track_id] = rf.p_G
    return LoopCandidate(query.frame_id, best_record.frame_id, matches,
                         inliers, pose, track_map)


class LoopDetector:
    """Synchronous or worker-thread loop detection with ordered queues.

    In asynchronous mode, submit() enqueues a query and poll() drains finished
    results; the caller enforces the delivery deadline (one camera-frame
    period) by discarding stale results.  Synchronous mode runs detection
    inline for deterministic tests and pipelines."""

    def __init__(self, db: KeyframeDatabase, cfg: LoopConfig,
                 synchronous: bool = True):
        self.db = db
        self.cfg = cfg
        self.synchronous = synchronous
        self._results: "queue.Queue[tuple[int, LoopCandidate | None]]" = queue.Queue()
        self._requests: "queue.Queue[KeyframeRecord | None]" = queue.Queue()
        self._worker = None
        if not synchronous:
            self._worker = threading.Thread(target=self._run, daemon=True)
            self._worker.start()

    def _run(self):
        while True:
            query = self._requests.get()
            if query is None:
                return
            self._results.put((query.frame_id, detect_loop(query, self.db, self.cfg)))

    def submit(self, query: KeyframeRecord) -> None:
        if self.synchronous:
            self._results.put((query.frame_id, detect_loop(query, self.db, self.cfg)))
        else:
            self._requests.put(query)

    def poll(self) -> list:
        out = []
        while True:
            try:
                out.append(self._results.get_nowait())
            except queue.Empty:
                return out

    def close(self) -> None:
        if self._worker is not None:
            self._requests.put(None)
            self._worker.join(timeout=2.0)
            self._worker = None
