"""
Problem assembly for global and local bundle adjustment.

Variants:
    VI      IMU + reprojection/depth for every landmark; planes unused
    VI_P    VI + per-point homography and per-point point-to-plane factors
    VI_CP   VI + compressed homography and compressed point-to-plane factors
    VIP     VI_CP with planar landmark states and their reprojection factors
            removed; planar points are recovered after the solve
"""

from dataclasses import dataclass

import numpy as np

from src.errors import InvalidVariant, RayParallelToPlane
from src.factors import (
    CompressedHomographyBatch,
    CompressedPointToPlaneBatch,
    HomographyPointBatch,
    ImuBatch,
    PointToPlaneBatch,
    ReprojDepthBatch,
)
from src.geometry import intersect_rays_with_planes
from src.logging_config import get_logger
from src.solver import Problem, SolverOptions
from src.state import StateVector

log = get_logger(__name__)

VARIANTS = ('VI', 'VI_P', 'VI_CP', 'VIP')


def check_variant(variant):
    if variant not in VARIANTS:
        raise InvalidVariant(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return variant


@dataclass
class PlaneTerms:
    """Rows of the observation table feeding plane factors, grouped the way the factors share states."""

    pair_i: np.ndarray       # observation rows of the first view of each homography pair
    pair_j: np.ndarray
    pair_plane: np.ndarray
    point_rows: np.ndarray   # observation rows of planar points (point-to-plane)
    point_plane: np.ndarray


def _homography_pairs(observations, rows, landmark_plane, topology):
    """Pairs of observation rows of the same planar landmark in two keyframes."""
    table = observations.subset(rows)
    pair_i, pair_j, planes = [], [], []
    for landmark_id, track in table.by_landmark().items():
        if len(track) < 2:
            continue
        track = rows[track]
        if topology == 'chain':
            first, second = track[:-1], track[1:]
        else:
            first, second = np.full(len(track) - 1, track[0]), track[1:]
        pair_i.append(first)
        pair_j.append(second)
        planes.append(np.full(len(first), landmark_plane[landmark_id], dtype=np.int64))
    if not pair_i:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(pair_i), np.concatenate(pair_j), np.concatenate(planes)


def plane_terms(slam_map, keyframe_ids, plane_ids, topology='star'):
    """Collect homography pairs and point-to-plane rows restricted to keyframes and planes."""
    observations = slam_map.observations
    landmark_plane = {lm.id: lm.plane_id for lm in slam_map.landmarks.values()
                      if lm.plane_id is not None and lm.plane_id in plane_ids}
    rows = np.flatnonzero(
        np.isin(observations.keyframe_ids, list(keyframe_ids))
        & np.isin(observations.landmark_ids, list(landmark_plane))
    )
    pair_i, pair_j, pair_plane = _homography_pairs(observations, rows, landmark_plane, topology)
    point_plane = np.array([landmark_plane[int(l)] for l in observations.landmark_ids[rows]], dtype=np.int64)
    return PlaneTerms(pair_i, pair_j, pair_plane, rows, point_plane)


def _groups(*keys):
    """Unique key rows and the group index of every element."""
    stacked = np.column_stack(keys) if len(keys[0]) else np.zeros((0, len(keys)), dtype=np.int64)
    unique, inverse = np.unique(stacked, axis=0, return_inverse=True)
    return unique, inverse.reshape(-1)


class PlanePointTriangulator:
    """Post-processing step that restores eliminated planar landmarks from the solved planes."""

    def __init__(self, slam_map, landmark_ids):
        self.slam_map = slam_map
        self.landmark_ids = list(landmark_ids)
        self.recovered = 0
        self.skipped = 0

    def __call__(self, states):
        positions, skipped = triangulate_plane_points(self.slam_map, states, self.landmark_ids,
                                                      skip_parallel=True)
        self.recovered = len(positions)
        self.skipped = skipped
        if skipped:
            log.warning("plane_points_skipped", skipped=skipped)
        if not positions:
            return states
        ids = sorted(positions)
        return states.with_landmarks(ids, [positions[i] for i in ids])


def triangulate_plane_points(slam_map, states, landmark_ids=None, skip_parallel=False):
    """
    Intersect each planar landmark's anchor bearing with its optimised plane.

    The anchor is the earliest keyframe in ``states`` that observed the point.

    Returns:
        dict landmark id -> position; with ``skip_parallel`` a tuple
        ``(positions, skipped count)``

    Raises:
        RayParallelToPlane: a bearing is parallel to its plane (unless skipped)
    """
    if landmark_ids is None:
        landmark_ids = slam_map.planar_landmark_ids()
    observations = slam_map.observations
    by_landmark = observations.by_landmark()
    anchors, planes, ids = [], [], []
    for landmark_id in landmark_ids:
        lm = slam_map.landmarks[landmark_id]
        if lm.plane_id is None or not states.has_plane(lm.plane_id):
            continue
        rows = by_landmark.get(landmark_id)
        if rows is None:
            continue
        rows = rows[[states.has_keyframe(k) for k in observations.keyframe_ids[rows]]]
        if len(rows) == 0:
            continue
        anchors.append(rows[0])
        planes.append(lm.plane_id)
        ids.append(landmark_id)
    if not ids:
        return ({}, 0) if skip_parallel else {}

    anchors = np.array(anchors)
    frames = states.frames()
    k = states.keyframe_indices(observations.keyframe_ids[anchors])
    bearings = observations.bearings(anchors)
    directions = np.einsum('bij,bj->bi', frames.R_wc[k], bearings)
    origins = frames.t_wc[k]
    eta = states.planes[states.plane_indices(planes)]
    distances = np.linalg.norm(eta, axis=1)
    normals = eta / distances[:, None]

    ok = np.abs(np.einsum('bi,bi->b', normals, directions)) >= 1e-9
    if not skip_parallel and not ok.all():
        bad = ids[int(np.flatnonzero(~ok)[0])]
        raise RayParallelToPlane(f"anchor ray of landmark {bad} is parallel to its plane")
    points = intersect_rays_with_planes(origins[ok], directions[ok], normals[ok], distances[ok]) if ok.any() \
        else np.zeros((0, 3))
    kept = [ids[i] for i in np.flatnonzero(ok)]
    positions = {landmark_id: points[i] for i, landmark_id in enumerate(kept)}
    if skip_parallel:
        return positions, int(np.count_nonzero(~ok))
    return positions


def _sigmas(settings, rig, depths):
    pixel = settings['PIXEL_SIGMA_PX'] / rig.focal
    depth = np.maximum(settings['DEPTH_SIGMA_REL'] * depths, settings['DEPTH_SIGMA_MIN'])
    return pixel, depth


def _build(slam_map, settings, variant, keyframe_ids, fixed_poses, fixed_motion, landmark_ids, plane_ids,
           options, name):
    check_variant(variant)
    observations = slam_map.observations
    rig = slam_map.rig
    keyframe_ids = sorted(int(k) for k in keyframe_ids)
    keyframe_set = set(keyframe_ids)
    use_planes = variant != 'VI'
    plane_ids = {int(p) for p in plane_ids} if use_planes else set()

    planar = {i for i in landmark_ids if slam_map.landmarks[i].plane_id in plane_ids}
    state_landmarks = [i for i in landmark_ids if not (variant == 'VIP' and i in planar)]
    states = StateVector.from_blocks(
        [slam_map.keyframes[k] for k in keyframe_ids],
        {i: slam_map.landmarks[i].position for i in state_landmarks},
        {p: slam_map.planes[p].plane for p in sorted(plane_ids)},
        rig.body_to_camera,
    )

    batches = []
    imu = [f for f in slam_map.preintegrations if f.frame_i in keyframe_set and f.frame_j in keyframe_set]
    if imu:
        batches.append(ImuBatch(imu))

    rows = np.flatnonzero(np.isin(observations.keyframe_ids, keyframe_ids)
                          & np.isin(observations.landmark_ids, state_landmarks))
    pixel_sigma, depth_sigma = _sigmas(settings, rig, observations.depths[rows])
    batches.append(ReprojDepthBatch(
        observations.keyframe_ids[rows], observations.landmark_ids[rows],
        observations.points[rows], observations.depths[rows],
        sigma_px=pixel_sigma, sigma_depth=depth_sigma, huber_delta=settings['HUBER_DELTA'],
    ))

    builders = []
    if use_planes and plane_ids:
        terms = plane_terms(slam_map, keyframe_set, plane_ids, settings['HOMOGRAPHY_TOPOLOGY'])
        h_sigma = settings['HOMOGRAPHY_SIGMA_PX'] / rig.focal
        p_sigma = settings['POINT_TO_PLANE_SIGMA']
        cutoff = settings['EIGEN_CUTOFF']
        points_i = observations.points[terms.pair_i]
        points_j = observations.points[terms.pair_j]
        frame_i = observations.keyframe_ids[terms.pair_i]
        frame_j = observations.keyframe_ids[terms.pair_j]
        local = observations.local_points(terms.point_rows)
        point_kf = observations.keyframe_ids[terms.point_rows]

        if variant == 'VI_P':
            huber = settings['HUBER_DELTA'] if settings['ROBUST_HOMOGRAPHY'] else None
            batches.append(HomographyPointBatch(frame_i, frame_j, terms.pair_plane, points_i, points_j,
                                                sigma=h_sigma, huber_delta=huber))
            batches.append(PointToPlaneBatch(point_kf, terms.point_plane, local, sigma=p_sigma))
        else:
            def build_homography():
                if len(frame_i) == 0:
                    return None
                keys, group = _groups(frame_i, frame_j, terms.pair_plane)
                return CompressedHomographyBatch.from_points(
                    keys[:, 0], keys[:, 1], keys[:, 2], group, points_i, points_j, sigma=h_sigma, cutoff=cutoff)

            def build_point_to_plane():
                if len(point_kf) == 0:
                    return None
                keys, group = _groups(point_kf, terms.point_plane)
                return CompressedPointToPlaneBatch.from_points(
                    keys[:, 0], keys[:, 1], group, local, sigma=p_sigma, cutoff=cutoff)

            builders.extend([build_homography, build_point_to_plane])

    post_process = None
    if variant == 'VIP' and planar:
        post_process = PlanePointTriangulator(slam_map, sorted(planar))

    problem = Problem(
        states, batches=batches, builders=builders, options=options,
        fixed_poses=fixed_poses, fixed_motion=fixed_motion,
        post_process=post_process, name=name, variant=variant,
    )
    log.debug("problem_assembled", problem=name, variant=variant, keyframes=len(keyframe_ids),
              landmarks=len(state_landmarks), planes=len(plane_ids), eliminated=len(planar) if variant == 'VIP' else 0)
    return problem


def assemble_gba(slam_map, settings, variant=None):
    """
    Global bundle adjustment over every keyframe; the first keyframe pose is the gauge.

    Raises:
        InvalidVariant: unknown variant
    """
    variant = check_variant(variant or settings['VARIANT'])
    keyframe_ids = slam_map.keyframe_ids()
    problem = _build(
        slam_map, settings, variant, keyframe_ids,
        fixed_poses=keyframe_ids[:1], fixed_motion=(),
        landmark_ids=sorted(slam_map.landmarks), plane_ids=sorted(slam_map.planes),
        options=SolverOptions.from_settings(settings), name='gba',
    )
    log.info("gba_assembled", variant=variant, keyframes=len(keyframe_ids),
             parameters=problem.state_dimension)
    return problem


def local_window(slam_map, newest_keyframe=None, window=20):
    """
    Free and fixed keyframes of a local window.

    Returns:
        (free ids, fixed ids, local landmark ids, local plane ids)
    """
    ids = slam_map.keyframe_ids()
    if newest_keyframe is not None:
        ids = [k for k in ids if k <= newest_keyframe]
    free = ids[-window:]
    observations = slam_map.observations
    in_window = np.isin(observations.keyframe_ids, free)
    landmarks = set(np.unique(observations.landmark_ids[in_window]).tolist())
    planes = {slam_map.landmarks[i].plane_id for i in landmarks} - {None}

    older = set(ids[:-window]) if len(ids) > window else set()
    shared = set(planes)
    observers = set()
    if older:
        plane_members = set()
        for plane_id in shared:
            plane_members |= slam_map.planes[plane_id].members
        touches = np.isin(observations.landmark_ids, list(landmarks | plane_members))
        observers = set(np.unique(observations.keyframe_ids[touches]).tolist()) & older
    return free, sorted(observers), sorted(landmarks), sorted(planes)


def assemble_lba(slam_map, settings, newest_keyframe=None, window=None, variant=None):
    """
    Local bundle adjustment over the newest ``window`` keyframes.

    Older keyframes observing the window's landmarks or planes enter with
    fixed states. Without such keyframes the oldest window keyframe is the gauge.
    """
    window = window or settings['LBA_WINDOW']
    variant = check_variant(variant or settings['VARIANT'])
    if variant == 'VIP' and not settings['LBA_ELIMINATE_PLANE_POINTS']:
        variant = 'VI_CP'
    free, fixed, landmarks, planes = local_window(slam_map, newest_keyframe, window)
    fixed_poses = fixed if fixed else free[:1]
    problem = _build(
        slam_map, settings, variant, free + fixed,
        fixed_poses=fixed_poses, fixed_motion=fixed,
        landmark_ids=landmarks, plane_ids=planes,
        options=SolverOptions.from_settings(settings, local=True), name='lba',
    )
    log.info("lba_assembled", variant=variant, free=len(free), fixed=len(fixed), landmarks=len(landmarks))
    return problem


def factor_inventory(slam_map, variant, topology='star'):
    """Factor counts by type that ``assemble_gba`` would produce for ``variant``."""
    check_variant(variant)
    keyframes = set(slam_map.keyframe_ids())
    observations = slam_map.observations
    planar = set(slam_map.planar_landmark_ids()) if variant != 'VI' else set()
    inventory = {'imu': len(slam_map.preintegrations)}
    if variant == 'VIP':
        inventory['reproj_depth'] = int(np.count_nonzero(~np.isin(observations.landmark_ids, list(planar))))
    else:
        inventory['reproj_depth'] = len(observations)
    if variant == 'VI' or not slam_map.planes:
        return inventory
    terms = plane_terms(slam_map, keyframes, set(slam_map.planes), topology)
    if variant == 'VI_P':
        inventory['homography_point'] = len(terms.pair_i)
        inventory['point_to_plane'] = len(terms.point_rows)
    else:
        inventory['compressed_homography'] = len(_groups(
            observations.keyframe_ids[terms.pair_i], observations.keyframe_ids[terms.pair_j], terms.pair_plane)[0])
        inventory['compressed_point_to_plane'] = len(_groups(
            observations.keyframe_ids[terms.point_rows], terms.point_plane)[0])
    return inventory
