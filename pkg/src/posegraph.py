"""
Pose-plane graph optimisation, run after an accepted loop and before GBA.

Nodes are keyframe poses and planes. Edges are sequential relative poses
(taken from the current estimate), loop relative poses and per-keyframe
plane observations fitted from the keyframe's own points on the plane.
"""

import numpy as np

from src.errors import DisconnectedGraph, InvalidProblem
from src.factors import PosePlaneBatch, PosePlaneFactor, RelativePoseBatch, RelativePoseFactor
from src.geometry import fit_plane
from src.logging_config import get_logger
from src.solver import Problem, SolverOptions, solve_lm
from src.state import StateVector

log = get_logger(__name__)


def _relative_information(rot_sigma_deg, trans_sigma):
    return np.diag([1.0 / trans_sigma] * 3 + [1.0 / np.deg2rad(rot_sigma_deg)] * 3)


class _UnionFind:

    def __init__(self, items):
        self.parent = {item: item for item in items}

    def find(self, item):
        root = item
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[item] != root:
            self.parent[item], item = root, self.parent[item]
        return root

    def union(self, a, b):
        self.parent[self.find(a)] = self.find(b)

    def groups(self):
        return len({self.find(item) for item in self.parent})


def odometry_links(slam_map):
    """Consecutive keyframe pairs joined by an IMU factor or a co-observed landmark."""
    ids = slam_map.keyframe_ids()
    imu = {(f.frame_i, f.frame_j) for f in slam_map.preintegrations}
    seen = {k: set(slam_map.observations.landmark_ids[rows].tolist())
            for k, rows in slam_map.observations.by_keyframe().items()}
    return [
        (i, j) for i, j in zip(ids[:-1], ids[1:])
        if (i, j) in imu or seen.get(i, set()) & seen.get(j, set())
    ]


def graph_edges(slam_map, loop_pairs, settings):
    """
    Build the edges of the pose-plane graph.

    Returns:
        (relative-pose factors, pose-plane factors)

    Raises:
        DisconnectedGraph: keyframes are not all connected by relative-pose edges
    """
    ids = slam_map.keyframe_ids()
    rig = slam_map.rig
    camera = {k: slam_map.keyframes[k].camera_pose(rig) for k in ids}

    sequential = _relative_information(settings['GRAPH_ROT_SIGMA_DEG'], settings['GRAPH_TRANS_SIGMA'])
    loop = _relative_information(settings['GRAPH_LOOP_ROT_SIGMA_DEG'], settings['GRAPH_LOOP_TRANS_SIGMA'])
    relative = [
        RelativePoseFactor(i, j, camera[i].inverse().compose(camera[j]), sequential)
        for i, j in odometry_links(slam_map)
    ]
    for pair in loop_pairs:
        if pair.frame_m in camera and pair.frame_n in camera:
            relative.append(RelativePoseFactor(pair.frame_m, pair.frame_n, pair.measured, loop))

    components = _UnionFind(ids)
    for factor in relative:
        components.union(factor.frame_i, factor.frame_j)
    if components.groups() > 1:
        raise DisconnectedGraph(f"pose graph has {components.groups()} disconnected components")

    plane_information = np.eye(3) / settings['GRAPH_PLANE_SIGMA']
    min_points = settings['GRAPH_MIN_PLANE_POINTS']
    pose_plane = []
    for plane_id in sorted(slam_map.planes):
        for keyframe_id, points in sorted(slam_map.planes[plane_id].local_points.items()):
            if keyframe_id in camera and len(points) >= min_points:
                measured = fit_plane(points)
                # orient like the world plane seen from this keyframe
                expected = slam_map.planes[plane_id].plane.transform(camera[keyframe_id].inverse())
                if measured.normal @ expected.normal < 0:
                    measured = measured.flipped()
                pose_plane.append(PosePlaneFactor(keyframe_id, plane_id, measured, plane_information))
    return relative, pose_plane


def _apply(slam_map, states):
    """Move keyframes, velocities, landmarks and planes onto the graph solution."""
    corrections = {}
    for k in slam_map.keyframe_ids():
        kf = slam_map.keyframes[k]
        new_pose = states.pose(k)
        correction = new_pose.compose(kf.pose.inverse())
        corrections[k] = correction
        kf.velocity = correction.rotation.rotate(kf.velocity)
        kf.pose = new_pose
    for plane_id in states.plane_ids:
        slam_map.planes[int(plane_id)].plane = states.plane(int(plane_id))

    observations = slam_map.observations
    for landmark_id, rows in observations.by_landmark().items():
        lm = slam_map.landmarks.get(landmark_id)
        if lm is None:
            continue
        first = int(observations.keyframe_ids[rows[0]])
        lm.position = corrections[first].act(lm.position)
        if lm.plane_id is not None and lm.plane_id in slam_map.planes:
            lm.position = slam_map.planes[lm.plane_id].plane.project(lm.position)


def optimize_pose_plane_graph(slam_map, loop_pairs, settings, apply=True):
    """
    Optimise keyframe poses and planes over relative-pose and pose-plane edges.

    The first keyframe pose is held fixed. With ``apply`` the map is updated:
    landmarks follow the correction of their first observer and velocities
    are rotated with their keyframe.

    Returns:
        (StateVector, SolveReport)

    Raises:
        InvalidProblem: no loop pairs
        DisconnectedGraph: keyframes not connected
    """
    loop_pairs = list(loop_pairs)
    if not loop_pairs:
        raise InvalidProblem("pose-plane graph optimisation needs at least one loop pair")
    relative, pose_plane = graph_edges(slam_map, loop_pairs, settings)
    plane_ids = sorted({f.plane_id for f in pose_plane})
    states = StateVector.from_blocks(
        slam_map.keyframes.values(),
        planes={p: slam_map.planes[p].plane for p in plane_ids},
        body_to_camera=slam_map.rig.body_to_camera,
    )
    options = SolverOptions.from_settings(settings)
    options.max_iterations = settings['GRAPH_MAX_ITERATIONS']
    options.max_time_s = None
    problem = Problem(
        states,
        batches=[RelativePoseBatch(relative)] + ([PosePlaneBatch(pose_plane)] if pose_plane else []),
        options=options,
        fixed_poses=slam_map.keyframe_ids()[:1],
        estimate_motion=False,
        name='pose_plane_graph',
    )
    solved, report = solve_lm(problem)
    log.info("pose_graph_optimized", loops=len(loop_pairs), relative_edges=len(relative),
             plane_edges=len(pose_plane), initial_cost=report.initial_cost, final_cost=report.final_cost)
    if apply:
        _apply(slam_map, solved)
    return solved, report

