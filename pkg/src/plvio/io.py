"""Dataset files: IMU CSV, feature-track text files, TUM trajectories, and
ground-truth CSV.  Every writer has a matching reader and round-trips
losslessly (floats are serialized with repr, which is shortest-exact).

Formats
-------
IMU CSV (EuRoC convention):      timestamp_ns,wx,wy,wz,ax,ay,az
Feature tracks, one record per line:
    P <frame> <track_id> <cam:0|1> <u> <v>
    L <frame> <line_id> <cam> <u1> <v1> <u2> <v2> [<zx> <zy> <nx> <ny>]
    D <frame> <track_id> <descriptor_hex>
  The optional line fields carry an explicit point-normal; when absent the
  point is the segment midpoint and the normal is derived from the endpoints.
  A stored normal that is not unit length is normalized on read with a
  warning.  D records carry simulated binary descriptors so loop closure
  works on re-ingested streams.
Trajectory (TUM):                timestamp_s tx ty tz qx qy qz qw
  with the quaternion giving the body-to-global rotation.
Ground truth CSV:                timestamp_ns,tx,ty,tz,qx,qy,qz,qw  (same
  orientation convention as TUM).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DanglingTrackId, NonMonotonicTime, ParseError
from .geom import Pose, UnitQuaternion
from .line_meas import LineMeas, LineObservation
from .point_meas import StereoObservation
from .propagation import ImuSample


@dataclass
class TrajectorySample:
    timestamp: int  # nanoseconds
    pose: Pose      # rotation q_GB (global->body), position in global


def _fmt(*vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


# ---------------------------------------------------------------------------
# IMU CSV


def write_imu_csv(path, samples: list[ImuSample]) -> None:
    with open(path, "w") as fh:
        fh.write("#timestamp_ns,wx,wy,wz,ax,ay,az\n")
        for s in samples:
            vals = ",".join(repr(float(x)) for x in (*s.gyro, *s.accel))
            fh.write(f"{s.timestamp},{vals}\n")


def ingest_imu_csv(path) -> list[ImuSample]:
    samples = []
    last_t = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#") or line.lower().startswith("timestamp"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ParseError(f"expected 7 comma-separated fields, got {len(parts)}",
                                 path=str(path), line=lineno)
            try:
                t = int(parts[0])
                vals = [float(x) for x in parts[1:]]
            except ValueError as exc:
                raise ParseError(str(exc), path=str(path), line=lineno) from exc
            if last_t is not None and t <= last_t:
                raise NonMonotonicTime(
                    f"{path}:{lineno}: timestamp {t} not after {last_t}")
            last_t = t
            samples.append(ImuSample(t, vals[0:3], vals[3:6]))
    return samples


# ---------------------------------------------------------------------------
# Feature tracks


@dataclass
class FrameBundle:
    """Observations of one camera frame after ingestion."""
    frame_id: int
    points: list = field(default_factory=list)  # (track_id, StereoObservation)
    lines: list = field(default_factory=list)   # (line_id, LineObservation)
    descriptors: dict = field(default_factory=dict)  # track_id -> bytes


def write_tracks(path, frames) -> None:
    """frames: iterable of SimFrame (or FrameBundle-shaped) objects."""
    with open(path, "w") as fh:
        for fr in frames:
            if hasattr(fr, "points") and fr.points and len(fr.points[0]) == 4:
                point_entries = [(tid, obs, desc) for tid, _, obs, desc in fr.points]
                line_entries = [(lid, obs) for lid, _, obs in fr.lines]
            else:
                point_entries = [(tid, obs, None) for tid, obs in fr.points]
                line_entries = list(fr.lines)
            for tid, obs, desc in point_entries:
                fh.write(f"P {fr.frame_id} {tid} 0 {_fmt(*obs.left_uv)}\n")
                if obs.right_uv is not None:
                    fh.write(f"P {fr.frame_id} {tid} 1 {_fmt(*obs.right_uv)}\n")
                if desc is not None:
                    fh.write(f"D {fr.frame_id} {tid} {desc.hex()}\n")
            for lid, obs in line_entries:
                for cam, meas in ((0, obs.left), (1, obs.right)):
                    if meas is None:
                        continue
                    fh.write(f"L {fr.frame_id} {lid} {cam} "
                             f"{_fmt(*meas.endpoints[0], *meas.endpoints[1])} "
                             f"{_fmt(*meas.point, *meas.normal)}\n")


def ingest_tracks(path) -> list[FrameBundle]:
    """Parse a feature-track file into per-frame bundles, frame ids ascending."""
    frames: dict[int, FrameBundle] = {}
    pending_points: dict[tuple, dict] = {}
    pending_lines: dict[tuple, dict] = {}

    def bundle(fid: int) -> FrameBundle:
        if fid not in frames:
            frames[fid] = FrameBundle(fid)
        return frames[fid]

    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "P":
                    if len(parts) != 6:
                        raise ValueError("P record needs 5 fields")
                    fid, tid, cam = int(parts[1]), int(parts[2]), int(parts[3])
                    if cam not in (0, 1):
                        raise ValueError(f"camera index must be 0 or 1, got {cam}")
                    uv = np.array([float(parts[4]), float(parts[5])])
                    pending_points.setdefault((fid, tid), {})[cam] = uv
                elif tag == "L":
                    if len(parts) not in (8, 12):
                        raise ValueError("L record needs 7 or 11 fields")
                    fid, lid, cam = int(parts[1]), int(parts[2]), int(parts[3])
                    if cam not in (0, 1):
                        raise ValueError(f"camera index must be 0 or 1, got {cam}")
                    e = np.array([float(x) for x in parts[4:8]]).reshape(2, 2)
                    if len(parts) == 12:
                        z = np.array([float(parts[8]), float(parts[9])])
                        n = np.array([float(parts[10]), float(parts[11])])
                        norm = np.linalg.norm(n)
                        if abs(norm - 1.0) > 1e-9:
                            warnings.warn(
                                f"{path}:{lineno}: line normal not unit "
                                f"(|n| = {norm:.6g}); normalizing")
                            n = n / norm
                    else:
                        d = e[1] - e[0]
                        d = d / np.linalg.norm(d)
                        z = 0.5 * (e[0] + e[1])
                        n = np.array([-d[1], d[0]])
                    pending_lines.setdefault((fid, lid), {})[cam] = LineMeas(z, n, e)
                elif tag == "D":
                    if len(parts) != 4:
                        raise ValueError("D record needs 3 fields")
                    fid, tid = int(parts[1]), int(parts[2])
                    bundle(fid).descriptors[tid] = bytes.fromhex(parts[3])
                else:
                    raise ValueError(f"unknown record tag {tag!r}")
            except ValueError as exc:
                raise ParseError(str(exc), path=str(path), line=lineno) from exc

    for (fid, tid), cams in pending_points.items():
        if 0 not in cams:
            raise DanglingTrackId(
                f"track {tid} frame {fid}: right-camera record without left")
        bundle(fid).points.append(
            (tid, StereoObservation(fid, cams[0], cams.get(1))))
    for (fid, lid), cams in pending_lines.items():
        if 0 not in cams:
            raise DanglingTrackId(
                f"line {lid} frame {fid}: right-camera record without left")
        bundle(fid).lines.append(
            (lid, LineObservation(fid, cams[0], cams.get(1))))
    out = [frames[fid] for fid in sorted(frames)]
    for fr in out:
        fr.points.sort(key=lambda e: e[0])
        fr.lines.sort(key=lambda e: e[0])
    return out


# ---------------------------------------------------------------------------
# Trajectories


def write_trajectory_tum(path, samples: list[TrajectorySample]) -> None:
    """TUM convention: orientation is body->global, i.e. the inverse of the
    state quaternion q_GB."""
    with open(path, "w") as fh:
        for s in samples:
            q = s.pose.rotation.inverse().xyzw
            p = s.pose.position
            fh.write(f"{s.timestamp / 1e9!r} {_fmt(*p, *q)}\n")


def read_trajectory_tum(path) -> list[TrajectorySample]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise ParseError("trajectory line needs 8 fields",
                                 path=str(path), line=lineno)
            vals = [float(x) for x in parts]
            pose = Pose(UnitQuaternion.from_xyzw(vals[4:8]).inverse(), vals[1:4])
            out.append(TrajectorySample(int(round(vals[0] * 1e9)), pose))
    return out


def write_groundtruth_csv(path, samples: list[TrajectorySample]) -> None:
    with open(path, "w") as fh:
        fh.write("#timestamp_ns,tx,ty,tz,qx,qy,qz,qw\n")
        for s in samples:
            q = s.pose.rotation.inverse().xyzw
            p = s.pose.position
            vals = ",".join(repr(float(x)) for x in (*p, *q))
            fh.write(f"{s.timestamp},{vals}\n")


def read_groundtruth_csv(path) -> list[TrajectorySample]:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise ParseError("ground-truth line needs 8 fields",
                                 path=str(path), line=lineno)
            t = int(parts[0])
            vals = [float(x) for x in parts[1:]]
            pose = Pose(UnitQuaternion.from_xyzw(vals[3:7]).inverse(), vals[0:3])
            out.append(TrajectorySample(t, pose))
    return out
