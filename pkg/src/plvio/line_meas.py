"""Line-feature measurement model.

A 2D line observation is point-normal: any point z on the line plus the unit
normal n.  A 3D line is over-parameterized by two endpoints (p_b, p_e); each
endpoint contributes one scalar residual per view, the signed point-to-line
distance n^T z - n^T proj(endpoint), so misalignment is always visible in at
least one residual component even when one projected endpoint happens to sit
on the observed line.

Jacobians reduce to the point-feature ones: each residual row is n^T times
the corresponding endpoint's point Jacobian row.  Marginalization projects
onto the left nullspace of the stacked endpoint Jacobian, exactly as for
points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateLine, InsufficientViews, RankDeficient
from .geom import Pose, skew
from .point_meas import ResidualBlock, StereoRig, projection_jacobian
from .state import FilterState

MIN_LINE_LENGTH = 0.05      # meters, 3D segment
MIN_PLANE_ANGLE = np.deg2rad(1.0)


def rot90(v) -> np.ndarray:
    """+90 degree rotation in the image plane; maps a normal to the line direction."""
    return np.array([-v[1], v[0]])


@dataclass
class LineMeas:
    """Point-normal line in one view, plus the detected segment endpoints."""
    point: np.ndarray
    normal: np.ndarray
    endpoints: np.ndarray  # 2x2, rows are the detected 2D endpoints

    def __post_init__(self):
        self.point = np.asarray(self.point, dtype=float)
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if abs(norm - 1.0) > 1e-9:
            n = n / norm
        self.normal = n
        self.endpoints = np.asarray(self.endpoints, dtype=float).reshape(2, 2)


@dataclass
class LineObservation:
    frame_id: int
    left: LineMeas
    right: LineMeas | None = None


class LineTrack:
    """Multi-frame observations of one 3D line segment."""

    __slots__ = ("line_id", "observations", "L_G")

    def __init__(self, line_id: int, observations=None):
        self.line_id = int(line_id)
        self.observations: list[LineObservation] = []
        for obs in observations or []:
            self.add(obs)
        self.L_G: tuple[np.ndarray, np.ndarray] | None = None

    def add(self, obs: LineObservation) -> None:
        if self.observations and obs.frame_id <= self.observations[-1].frame_id:
            raise ValueError("line observations must have increasing frame_ids")
        self.observations.append(obs)

    def __len__(self) -> int:
        return len(self.observations)


def point_normal_residual(z, n, zb_hat, ze_hat) -> np.ndarray:
    """Two point-to-line distances sharing one observed (z, n)."""
    n = np.asarray(n, dtype=float)
    z = np.asarray(z, dtype=float)
    return np.array([float(n @ z - n @ np.asarray(zb_hat, dtype=float)),
                     float(n @ z - n @ np.asarray(ze_hat, dtype=float))])


def _view_planes(track: LineTrack, state: FilterState, rig: StereoRig):
    """Back-project each observed segment to its interpretation plane.

    Returns (normals, offsets, poses) with plane equations n.x + d = 0 in the
    global frame; each plane passes through its camera center.
    """
    normals, offsets, poses = [], [], []
    for obs in track.observations:
        clone = state.clone_by_frame(obs.frame_id)
        views = [(clone.pose, obs.left)]
        if obs.right is not None:
            views.append((rig.right_pose(clone.pose), obs.right))
        for pose, meas in views:
            e1 = np.array([meas.endpoints[0, 0], meas.endpoints[0, 1], 1.0])
            e2 = np.array([meas.endpoints[1, 0], meas.endpoints[1, 1], 1.0])
            m_cam = np.cross(e1, e2)
            norm = np.linalg.norm(m_cam)
            if norm < 1e-12:
                continue
            m_cam /= norm
            C = pose.rotation.rotation_matrix()
            n_G = C.T @ m_cam
            normals.append(n_G)
            offsets.append(-float(n_G @ pose.position))
            poses.append(pose)
    return np.array(normals), np.array(offsets), poses


def _closest_point_on_line_to_ray(p0, d_line, origin, d_ray) -> np.ndarray:
    """Point on the infinite line p0 + s*d_line nearest to the given ray."""
    a = float(d_line @ d_line)
    b = float(d_line @ d_ray)
    c = float(d_ray @ d_ray)
    w = origin - p0
    denom = a * c - b * b
    if abs(denom) < 1e-12:
        # Ray parallel to line: project the ray origin onto the line.
        s = float(d_line @ w) / a
    else:
        s = (c * float(d_line @ w) - b * float(d_ray @ w)) / denom
    return p0 + s * d_line


def triangulate_line(track: LineTrack, state: FilterState, rig: StereoRig,
                     min_plane_angle: float = MIN_PLANE_ANGLE,
                     min_length: float = MIN_LINE_LENGTH):
    """3D line from the intersection of back-projected planes.

    The infinite line is the two-dimensional nullspace of the stacked plane
    equations (smallest-singular-vector solution over all views); endpoints
    come from intersecting the first view's detected endpoints' rays with it,
    ordered so p_b has the smaller u in the first view.
    """
    normals, offsets, poses = _view_planes(track, state, rig)
    if len(normals) < 2:
        raise InsufficientViews("need at least two views of the line")

    # Angle between the most-separated pair of interpretation planes.
    best = 0.0
    for i in range(len(normals)):
        dots = np.abs(normals[i + 1:] @ normals[i])
        if dots.size:
            best = max(best, float(np.max(np.arccos(np.clip(dots, -1.0, 1.0)))))
    if best < min_plane_angle:
        raise DegenerateLine(
            f"interpretation planes nearly parallel ({np.rad2deg(best):.3f} deg)")

    A = np.hstack([normals, offsets[:, None]])
    _, _, Vt = np.linalg.svd(A)
    h1, h2 = Vt[-1], Vt[-2]
    # Direction: the pencil member with zero homogeneous part.
    dir_h = h2[3] * h1 - h1[3] * h2
    d_line = dir_h[:3]
    if np.linalg.norm(d_line) < 1e-12:
        raise DegenerateLine("line direction is numerically undefined")
    d_line = d_line / np.linalg.norm(d_line)
    # A finite point: the pencil member with the larger homogeneous part.
    p_h = h1 if abs(h1[3]) >= abs(h2[3]) else h2
    p0 = p_h[:3] / p_h[3]

    first = track.observations[0]
    first_pose = state.clone_by_frame(first.frame_id).pose
    C0 = first_pose.rotation.rotation_matrix()
    endpoints_2d = first.left.endpoints
    order = np.argsort(endpoints_2d[:, 0])  # p_b gets the smaller u
    pts = []
    for idx in order:
        e = endpoints_2d[idx]
        ray_dir = C0.T @ np.array([e[0], e[1], 1.0])
        pts.append(_closest_point_on_line_to_ray(p0, d_line, first_pose.position, ray_dir))
    p_b, p_e = pts
    if np.linalg.norm(p_b - p_e) <= min_length:
        raise DegenerateLine(f"triangulated segment shorter than {min_length} m")
    return p_b, p_e


def _endpoint_projections(p_b, p_e, pose: Pose, z_min: float = 1e-3):
    C = pose.rotation.rotation_matrix()
    pb_c = C @ (p_b - pose.position)
    pe_c = C @ (p_e - pose.position)
    if pb_c[2] <= z_min or pe_c[2] <= z_min:
        raise BehindCamera("projected line endpoint behind camera")
    return pb_c, pe_c


def line_residual(obs: LineObservation, L_G, clone_pose: Pose, rig: StereoRig) -> np.ndarray:
    """Stacked point-to-line residual: 2 rows monocular, 4 rows stereo
    (left endpoint pair first, then right)."""
    p_b, p_e = L_G
    rows = []
    views = [(clone_pose, obs.left)]
    if obs.right is not None:
        views.append((rig.right_pose(clone_pose), obs.right))
    for pose, meas in views:
        pb_c, pe_c = _endpoint_projections(p_b, p_e, pose)
        zb_hat = pb_c[:2] / pb_c[2]
        ze_hat = pe_c[:2] / pe_c[2]
        rows.append(point_normal_residual(meas.point, meas.normal, zb_hat, ze_hat))
    return np.concatenate(rows)


def line_jacobians(obs: LineObservation, L_G, state: FilterState, clone_index: int,
                   rig: StereoRig):
    """Jacobians of the line residual w.r.t. the state and the two endpoints.

    Row i is n^T times the point-feature Jacobian row of the corresponding
    endpoint, so H_l is (rows x 6): columns 0:3 for p_b, 3:6 for p_e.
    """
    p_b, p_e = L_G
    clone = state.clones[clone_index]
    s = state.clone_slice(clone_index)
    dim = state.err_dim()
    C1 = clone.pose.rotation.rotation_matrix()

    def point_pieces(p_G):
        """Prediction Jacobians of one endpoint in (left, right) cameras."""
        p_c1 = C1 @ (p_G - clone.pose.position)
        out = []
        if p_c1[2] <= 1e-3:
            raise BehindCamera("endpoint behind left camera")
        Jp = projection_jacobian(p_c1)
        out.append((Jp @ skew(p_c1), -Jp @ C1, Jp @ C1))
        if obs.right is not None:
            C_lr = rig.rotation_lr.rotation_matrix()
            p_c2 = C_lr @ (p_c1 - rig.baseline)
            if p_c2[2] <= 1e-3:
                raise BehindCamera("endpoint behind right camera")
            Jp2 = projection_jacobian(p_c2)
            out.append((Jp2 @ C_lr @ skew(p_c1), -Jp2 @ C_lr @ C1, Jp2 @ C_lr @ C1))
        return out

    pieces_b = point_pieces(p_b)
    pieces_e = point_pieces(p_e)
    normals = [obs.left.normal] + ([obs.right.normal] if obs.right is not None else [])

    n_rows = 2 * len(normals)
    H_X = np.zeros((n_rows, dim))
    H_l = np.zeros((n_rows, 6))
    row = 0
    for view, n in enumerate(normals):
        Jth_b, Jp_b, Jf_b = pieces_b[view]
        Jth_e, Jp_e, Jf_e = pieces_e[view]
        H_X[row, s.start:s.start + 3] = n @ Jth_b
        H_X[row, s.start + 3:s.stop] = n @ Jp_b
        H_l[row, 0:3] = n @ Jf_b
        H_X[row + 1, s.start:s.start + 3] = n @ Jth_e
        H_X[row + 1, s.start + 3:s.stop] = n @ Jp_e
        H_l[row + 1, 3:6] = n @ Jf_e
        row += 2
    return H_X, H_l


def marginalize_line(r: np.ndarray, H_X_l: np.ndarray, H_l: np.ndarray,
                     noise_sigma: float,
                     min_rank_ratio: float = 1e-8) -> ResidualBlock:
    """Left-nullspace projection of the stacked endpoint Jacobian (6 columns)."""
    m = r.shape[0]
    U, s, _ = np.linalg.svd(H_l, full_matrices=True)
    tol = max(min_rank_ratio * (s[0] if s.size else 0.0), 1e-12)
    rank = int(np.sum(s > tol))
    if m - rank < 1:
        raise RankDeficient(
            f"{m} rows with endpoint-Jacobian rank {rank}: no constraint survives")
    A = U[:, rank:]
    resid = float(np.max(np.abs(A.T @ H_l)))
    if resid > 1e-10:
        raise RankDeficient("endpoint Jacobian is numerically ill-conditioned")
    return ResidualBlock(A.T @ r, A.T @ H_X_l, noise_sigma,
                         nullspace_residual=resid)
