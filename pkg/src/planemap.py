"""
Plane lifecycle on the map: detection from labelled points, refinement,
merging and point-plane association with a geometric consistency check.

Horizontal planes are found from a height histogram, vertical planes from
an azimuth histogram followed by an offset histogram inside each azimuth
peak. Point normals come with the points (the simulator labels them).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.spatial import ConvexHull, QhullError

from src.errors import EmptyPointSet, RankDeficient
from src.geometry import Plane, fit_plane
from src.logging_config import get_logger

log = get_logger(__name__)


@dataclass(frozen=True)
class PlaneParams:
    """Thresholds for detection, merging and association."""

    detect_angle_deg: float = 10.0
    detect_distance: float = 0.05
    height_bin: float = 0.02
    azimuth_bin_deg: float = 2.0
    min_support: int = 50
    merge_angle_deg: float = 10.0
    merge_distance: float = 0.10
    associate_distance: float = 0.10
    extent_margin: float = 0.5
    min_keyframes: int = 3
    consistency_relative: float = 0.20
    consistency_floor_px: float = 0.25
    consistency_max_px: float = 2.0
    strikes: int = 3

    @classmethod
    def from_settings(cls, settings):
        return cls(
            detect_angle_deg=settings['DETECT_ANGLE_DEG'],
            detect_distance=settings['DETECT_DISTANCE'],
            height_bin=settings['DETECT_HEIGHT_BIN'],
            azimuth_bin_deg=settings['DETECT_AZIMUTH_BIN_DEG'],
            min_support=settings['DETECT_MIN_SUPPORT'],
            merge_angle_deg=settings['MERGE_ANGLE_DEG'],
            merge_distance=settings['MERGE_DISTANCE'],
            associate_distance=settings['ASSOCIATE_DISTANCE'],
            extent_margin=settings['ASSOCIATE_EXTENT_MARGIN'],
            min_keyframes=settings['ASSOCIATE_MIN_KEYFRAMES'],
            consistency_relative=settings['CONSISTENCY_RELATIVE'],
            consistency_floor_px=settings['CONSISTENCY_FLOOR_PX'],
            consistency_max_px=settings['CONSISTENCY_MAX_PX'],
            strikes=settings['CONSISTENCY_STRIKES'],
        )


@dataclass(frozen=True)
class MergeAction:
    survivor: int
    absorbed: int


def _up_basis(gravity):
    """Unit up vector and two horizontal axes for a gravity direction."""
    g = np.asarray(gravity, dtype=float).reshape(3)
    norm = np.linalg.norm(g)
    if norm < 1e-12:
        raise ValueError("gravity must be non-zero")
    up = -g / norm
    e1, e2 = plane_basis(up)
    return up, e1, e2


def plane_basis(normal):
    """Two unit vectors spanning the plane orthogonal to ``normal``."""
    n = np.asarray(normal, dtype=float)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u)


# --- refinement ---

def refine_horizontal(points, up=(0.0, 0.0, 1.0)):
    """
    Plane with normal ``up`` through the mean height of ``points``.

    Raises:
        EmptyPointSet: no points
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointSet("cannot refine a horizontal plane from no points")
    up = np.asarray(up, dtype=float)
    return Plane(up, -float(np.mean(points @ up)))


def vertical_coefficients(points, e1=(1.0, 0.0, 0.0), e2=(0.0, 1.0, 0.0)):
    """
    Least-squares ``[a, b]`` with ``a * x_k + b * y_k = -1`` (``x, y`` along e1, e2), via QR.

    Raises:
        RankDeficient: the horizontal projections have rank below 2
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    A = np.column_stack([points @ np.asarray(e1, dtype=float), points @ np.asarray(e2, dtype=float)])
    if len(A) < 2:
        raise RankDeficient("a vertical plane needs at least two points")
    Q, R = qr(A, mode='economic')
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        raise RankDeficient("horizontal projections of the points are rank deficient")
    return solve_triangular(R, Q.T @ -np.ones(len(A)))


def refine_vertical(points, e1=(1.0, 0.0, 0.0), e2=(0.0, 1.0, 0.0)):
    """
    Vertical plane through ``points``; the result has ``d <= 0``.

    Raises:
        RankDeficient: points are degenerate or the plane contains the origin
    """
    a, b = vertical_coefficients(points, e1, e2)
    scale = np.hypot(a, b)
    normal = -(a * np.asarray(e1, dtype=float) + b * np.asarray(e2, dtype=float)) / scale
    return Plane(normal, -1.0 / scale)


def refine_plane(points, kind, up=(0.0, 0.0, 1.0)):
    if kind == 'horizontal':
        return refine_horizontal(points, up)
    if kind == 'vertical':
        e1, e2 = plane_basis(np.asarray(up, dtype=float))
        return refine_vertical(points, e1, e2)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 3:
        raise EmptyPointSet("a general plane needs at least three points")
    return fit_plane(points)


# --- detection ---

def _peak(values, width, window, origin=None, circular_bins=None):
    """Bin ``values`` and return (windowed count, bin centre) of the strongest window."""
    if circular_bins is not None:
        bins = np.floor(values / width).astype(np.int64) % circular_bins
        counts = np.bincount(bins, minlength=circular_bins)
        padded = np.concatenate([counts[-window:], counts, counts[:window]])
        windowed = np.convolve(padded, np.ones(2 * window + 1, dtype=np.int64), mode='valid')
        best = int(np.argmax(windowed))
        return int(windowed[best]), (best + 0.5) * width
    origin = values.min() if origin is None else origin
    bins = np.floor((values - origin) / width).astype(np.int64)
    counts = np.bincount(bins)
    padded = np.concatenate([np.zeros(window, dtype=np.int64), counts, np.zeros(window, dtype=np.int64)])
    windowed = np.convolve(padded, np.ones(2 * window + 1, dtype=np.int64), mode='valid')
    best = int(np.argmax(windowed))
    return int(windowed[best]), origin + (best + 0.5) * width


def _grow(points, normals, candidates, plane, cos_gate, distance):
    close = np.abs(plane.signed_distance(points[candidates])) <= distance
    aligned = np.abs(normals[candidates] @ plane.normal) >= cos_gate
    return candidates[close & aligned]


def detect_plane_members(points, normals, gravity, params=None):
    """
    Histogram plane detection.

    Returns:
        list of (Plane, kind, member indices into ``points``)
    """
    params = params or PlaneParams()
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    normals = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return []
    normals = normals / np.maximum(np.linalg.norm(normals, axis=1, keepdims=True), 1e-12)
    up, e1, e2 = _up_basis(gravity)
    cos_gate = np.cos(np.deg2rad(params.detect_angle_deg))
    sin_gate = np.sin(np.deg2rad(params.detect_angle_deg))
    found = []

    heights = points @ up
    tilt = np.abs(normals @ up)
    remaining = np.flatnonzero(tilt >= cos_gate)
    while len(remaining) >= params.min_support:
        support, centre = _peak(heights[remaining], params.height_bin, 1)
        if support < params.min_support:
            break
        seed = remaining[np.abs(heights[remaining] - centre) <= 1.5 * params.height_bin]
        plane = refine_horizontal(points[seed], up)
        members = _grow(points, normals, remaining, plane, cos_gate, params.detect_distance)
        if len(members) < params.min_support:
            remaining = np.setdiff1d(remaining, seed)
            continue
        plane = refine_horizontal(points[members], up)
        members = _grow(points, normals, remaining, plane, cos_gate, params.detect_distance)
        found.append((plane, 'horizontal', members))
        remaining = np.setdiff1d(remaining, np.union1d(members, seed))

    azimuth_bins = int(round(180.0 / params.azimuth_bin_deg))
    azimuth = np.rad2deg(np.arctan2(normals @ e2, normals @ e1)) % 180.0
    pool = np.flatnonzero(tilt <= sin_gate)
    while len(pool) >= params.min_support:
        support, centre = _peak(azimuth[pool], params.azimuth_bin_deg, 2, circular_bins=azimuth_bins)
        if support < params.min_support:
            break
        gap = np.abs((azimuth[pool] - centre + 90.0) % 180.0 - 90.0)
        group = pool[gap <= 2.5 * params.azimuth_bin_deg]
        # axial mean: azimuths are folded to [0, 180)
        doubled = np.deg2rad(2.0 * azimuth[group])
        mean = 0.5 * np.arctan2(np.sin(doubled).mean(), np.cos(doubled).mean())
        direction = np.cos(mean) * e1 + np.sin(mean) * e2
        offsets = points @ direction
        inside = group
        while len(inside) >= params.min_support:
            support, offset = _peak(offsets[inside], params.height_bin, 1)
            if support < params.min_support:
                break
            seed = inside[np.abs(offsets[inside] - offset) <= 1.5 * params.height_bin]
            try:
                plane = refine_vertical(points[seed], e1, e2)
                members = _grow(points, normals, pool, plane, cos_gate, params.detect_distance)
                if len(members) >= params.min_support:
                    plane = refine_vertical(points[members], e1, e2)
                    members = _grow(points, normals, pool, plane, cos_gate, params.detect_distance)
            except RankDeficient:
                members = np.zeros(0, dtype=np.int64)
            if len(members) >= params.min_support:
                found.append((plane, 'vertical', members))
                pool = np.setdiff1d(pool, members)
            inside = np.setdiff1d(inside, np.union1d(members, seed))
        pool = np.setdiff1d(pool, group)
    return found


def detect_planes(points, normals, gravity, params=None):
    """Planes found in a labelled point cloud; empty input gives an empty list."""
    return [plane for plane, _, _ in detect_plane_members(points, normals, gravity, params)]


# --- boundaries, merging ---

def plane_boundary(plane, points):
    """Convex-hull vertices of ``points`` projected onto ``plane`` (all points if the hull fails)."""
    points = plane.project(np.asarray(points, dtype=float).reshape(-1, 3))
    if len(points) < 3:
        return points
    u, v = plane_basis(plane.normal)
    flat = np.column_stack([points @ u, points @ v])
    try:
        hull = ConvexHull(flat)
    except QhullError:
        return points
    return points[hull.vertices]


def _extent(points, u, v):
    flat = np.column_stack([points @ u, points @ v])
    return flat.min(axis=0), flat.max(axis=0)


def _overlap(a, b, plane):
    if len(a) == 0 or len(b) == 0:
        return False
    u, v = plane_basis(plane.normal)
    lo_a, hi_a = _extent(a, u, v)
    lo_b, hi_b = _extent(b, u, v)
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


def _member_positions(slam_map, plane):
    ids = sorted(plane.members)
    if not ids:
        return np.zeros((0, 3))
    return np.stack([slam_map.landmarks[i].position for i in ids])


def _refit(slam_map, plane, up):
    """Re-refine a map plane from its members, snap them and refresh its derived data."""
    positions = _member_positions(slam_map, plane)
    if len(positions):
        try:
            plane.plane = refine_plane(positions, plane.kind, up)
        except (EmptyPointSet, RankDeficient):
            pass
        for landmark_id in plane.members:
            lm = slam_map.landmarks[landmark_id]
            lm.position = plane.plane.project(lm.position)
            lm.plane_id = plane.id
    plane.boundary = plane_boundary(plane.plane, _member_positions(slam_map, plane))
    slam_map.refresh_plane_points(plane.id)


def _mergeable(a, b, params):
    cos_gate = np.cos(np.deg2rad(params.merge_angle_deg))
    dot = float(a.plane.normal @ b.plane.normal)
    if abs(dot) < cos_gate:
        return False
    d_b = b.plane.distance if dot > 0 else -b.plane.distance
    if abs(a.plane.distance - d_b) > params.merge_distance:
        return False
    return _overlap(a.boundary, b.boundary, a.plane)


def merge_planes(slam_map, params=None):
    """
    Merge map planes that agree in orientation, offset and extent.

    The older (lower) id survives. Passes repeat until nothing merges.

    Returns:
        list of MergeAction
    """
    params = params or PlaneParams()
    up = -np.asarray(slam_map.gravity, dtype=float) / np.linalg.norm(slam_map.gravity)
    actions = []
    merged = True
    while merged:
        merged = False
        ids = sorted(slam_map.planes)
        for pos, a_id in enumerate(ids):
            for b_id in ids[pos + 1:]:
                a, b = slam_map.planes[a_id], slam_map.planes[b_id]
                if not _mergeable(a, b, params):
                    continue
                a.members |= b.members
                survivor_candidates = slam_map.candidates[a_id]
                absorbed_candidates = slam_map.candidates.get(b_id)
                if absorbed_candidates is not None:
                    for landmark_id, count in absorbed_candidates.failures.items():
                        survivor_candidates.failures[landmark_id] = max(
                            count, survivor_candidates.failures.get(landmark_id, 0))
                    survivor_candidates.rejected |= absorbed_candidates.rejected
                slam_map.remove_plane(b_id)
                _refit(slam_map, a, up)
                actions.append(MergeAction(a_id, b_id))
                merged = True
                break
            if merged:
                break
    if actions:
        log.info("planes_merged", merges=len(actions), planes=len(slam_map.planes))
    return actions


# --- association ---

def _camera_frames(slam_map):
    frames = {}
    for kf_id, kf in slam_map.keyframes.items():
        T = kf.camera_pose(slam_map.rig)
        frames[kf_id] = (T.R, T.translation)
    return frames


def _reprojection_px(position, rows, observations, frames, focal):
    kf_ids = observations.keyframe_ids[rows]
    R = np.stack([frames[int(k)][0] for k in kf_ids])
    t = np.stack([frames[int(k)][1] for k in kf_ids])
    local = np.einsum('kji,kj->ki', R, position - t)
    z = np.where(local[:, 2] > 1e-9, local[:, 2], 1e-9)
    err = local[:, :2] / z[:, None] - observations.points[rows]
    return np.linalg.norm(err, axis=1) * focal


def associate_points(slam_map, plane_id, params=None):
    """
    Admit free landmarks near ``plane_id``.

    Candidates lie within the association distance and inside the plane's
    extent (plus margin). Landmarks seen in more than ``min_keyframes``
    keyframes must keep a similar reprojection error when forced onto the
    plane; failures are counted and repeated failures are rejected.

    Returns:
        sorted list of admitted landmark ids
    """
    params = params or PlaneParams()
    plane = slam_map.planes[plane_id]
    candidate_set = slam_map.candidates[plane_id]
    free = [lm for lm in slam_map.landmarks.values()
            if lm.plane_id is None and lm.id not in candidate_set.rejected]
    if not free:
        return []
    positions = np.stack([lm.position for lm in free])
    near = np.abs(plane.plane.signed_distance(positions)) <= params.associate_distance
    if len(plane.boundary):
        u, v = plane_basis(plane.plane.normal)
        lo, hi = _extent(plane.boundary, u, v)
        flat = np.column_stack([positions @ u, positions @ v])
        near &= np.all((flat >= lo - params.extent_margin) & (flat <= hi + params.extent_margin), axis=1)
    if not near.any():
        return []

    observations = slam_map.observations
    by_landmark = observations.by_landmark()
    frames = _camera_frames(slam_map)
    focal = slam_map.rig.focal
    admitted = []
    for lm in (free[i] for i in np.flatnonzero(near)):
        rows = by_landmark.get(lm.id)
        if rows is None or len(rows) == 0:
            continue
        rows = rows[np.isin(observations.keyframe_ids[rows], list(frames))]
        snapped = plane.plane.project(lm.position)
        if len(np.unique(observations.keyframe_ids[rows])) > params.min_keyframes:
            free_err = _reprojection_px(lm.position, rows, observations, frames, focal)
            plane_err = _reprojection_px(snapped, rows, observations, frames, focal)
            rms_free = float(np.sqrt(np.mean(free_err ** 2)))
            rms_plane = float(np.sqrt(np.mean(plane_err ** 2)))
            consistent = (abs(rms_plane - rms_free) <= params.consistency_relative * rms_free
                          + params.consistency_floor_px
                          and float(plane_err.max()) < params.consistency_max_px)
            if not consistent:
                candidate_set.record_failure(lm.id, params.strikes)
                continue
        candidate_set.failures.pop(lm.id, None)
        lm.position = snapped
        lm.plane_id = plane_id
        plane.members.add(lm.id)
        admitted.append(lm.id)

    if admitted:
        plane.boundary = plane_boundary(plane.plane, _member_positions(slam_map, plane))
        slam_map.refresh_plane_points(plane_id)
    log.debug("points_associated", plane=plane_id, admitted=len(admitted),
              rejected=len(candidate_set.rejected))
    return sorted(admitted)


# --- map-level entry points ---

def planes_from_labels(slam_map, labels, kinds):
    """
    Create one map plane per labelled group and admit its members.

    Args:
        labels: landmark id -> ground-truth plane id
        kinds: ground-truth plane id -> kind

    Returns:
        dict ground-truth plane id -> map plane id
    """
    up = -np.asarray(slam_map.gravity, dtype=float) / np.linalg.norm(slam_map.gravity)
    groups = {}
    for landmark_id, label in labels.items():
        if label is not None and landmark_id in slam_map.landmarks:
            groups.setdefault(int(label), []).append(int(landmark_id))
    mapping = {}
    for label in sorted(groups):
        members = sorted(groups[label])
        positions = np.stack([slam_map.landmarks[i].position for i in members])
        kind = kinds[label]
        try:
            plane = refine_plane(positions, kind, up)
        except (EmptyPointSet, RankDeficient):
            continue
        map_plane = slam_map.add_plane(plane, kind)
        map_plane.members = set(members)
        _refit(slam_map, map_plane, up)
        mapping[label] = map_plane.id
    return mapping


def detect_and_associate(slam_map, params=None):
    """Detect planes among free landmarks, merge duplicates, then associate remaining points."""
    params = params or PlaneParams()
    up = -np.asarray(slam_map.gravity, dtype=float) / np.linalg.norm(slam_map.gravity)
    free = [lm for lm in slam_map.landmarks.values() if lm.plane_id is None]
    if free:
        positions = np.stack([lm.position for lm in free])
        normals = np.stack([lm.normal for lm in free])
        for plane, kind, members in detect_plane_members(positions, normals, slam_map.gravity, params):
            map_plane = slam_map.add_plane(plane, kind)
            map_plane.members = {free[i].id for i in members}
            _refit(slam_map, map_plane, up)
    merge_planes(slam_map, params)
    admitted = 0
    for plane_id in sorted(slam_map.planes):
        admitted += len(associate_points(slam_map, plane_id, params))
    log.info("planes_detected", planes=len(slam_map.planes), associated=admitted,
             planar=len(slam_map.planar_landmark_ids()))
    return sorted(slam_map.planes)
