from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.geometry import Plane, Pose


@dataclass
class CameraRig:
    """
    Pinhole camera rigidly mounted on the IMU.
    ``body_to_camera`` maps camera-frame points into the IMU body frame.
    """
    fx: float = 460.0
    fy: float = 460.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    body_to_camera: Pose = field(default_factory=Pose.identity)

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    @property
    def fov_limit(self):
        """Largest |x| or |y| on the normalised image plane inside the image."""
        return max(self.cx / self.fx, (self.width - self.cx) / self.fx,
                   self.cy / self.fy, (self.height - self.cy) / self.fy)

    def pixels_to_normalized(self, sigma_px):
        return sigma_px / self.focal

    def to_pixels(self, points):
        """Normalised image points (N,2) to pixel coordinates."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        return np.column_stack([self.fx * points[:, 0] + self.cx, self.fy * points[:, 1] + self.cy])

    def in_image(self, points, margin=1.0):
        uv = self.to_pixels(points)
        return ((uv[:, 0] >= margin) & (uv[:, 0] <= self.width - margin)
                & (uv[:, 1] >= margin) & (uv[:, 1] <= self.height - margin))

    def __repr__(self):
        return f'<CameraRig fx={self.fx} {self.width}x{self.height}>'


@dataclass
class KeyframeState:
    """IMU body state of one keyframe."""
    id: int
    timestamp: float
    pose: Pose  # body to world
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    imu_index: int = -1  # tick of the keyframe in the IMU stream

    def camera_pose(self, rig):
        return self.pose.compose(rig.body_to_camera)

    def __repr__(self):
        return f'<Keyframe {self.id} t={self.timestamp:.3f}>'


@dataclass
class Landmark:
    """A 3D map point. ``normal`` is the surface-normal label used by plane detection."""
    id: int
    position: np.ndarray
    normal: np.ndarray = field(default_factory=lambda: np.zeros(3))
    plane_id: Optional[int] = None

    def __repr__(self):
        return f'<Landmark {self.id} plane={self.plane_id}>'


@dataclass
class ObservationTable:
    """Column store of keyframe observations: normalised point and measured depth."""
    keyframe_ids: np.ndarray
    landmark_ids: np.ndarray
    points: np.ndarray  # (N, 2) normalised image coordinates
    depths: np.ndarray  # (N,) metres along the optical axis

    def __post_init__(self):
        self.keyframe_ids = np.asarray(self.keyframe_ids, dtype=np.int64).reshape(-1)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(-1)
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        self.depths = np.asarray(self.depths, dtype=float).reshape(-1)
        n = len(self.keyframe_ids)
        if not (len(self.landmark_ids) == len(self.points) == len(self.depths) == n):
            raise ValueError("observation columns differ in length")

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros(0))

    def __len__(self):
        return len(self.keyframe_ids)

    def subset(self, mask):
        return ObservationTable(self.keyframe_ids[mask], self.landmark_ids[mask],
                                self.points[mask], self.depths[mask])

    def bearings(self, rows=None):
        points = self.points if rows is None else self.points[rows]
        return np.column_stack([points, np.ones(len(points))])

    def local_points(self, rows=None):
        """Camera-frame points ``depth * [x, y, 1]``."""
        depths = self.depths if rows is None else self.depths[rows]
        return self.bearings(rows) * depths[:, None]

    def by_landmark(self):
        """Landmark id -> observation rows ordered by keyframe id."""
        order = np.lexsort((self.keyframe_ids, self.landmark_ids))
        ids = self.landmark_ids[order]
        if len(ids) == 0:
            return {}
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        ends = np.r_[starts[1:], len(ids)]
        return {int(ids[s]): order[s:e] for s, e in zip(starts, ends)}

    def by_keyframe(self):
        order = np.lexsort((self.landmark_ids, self.keyframe_ids))
        ids = self.keyframe_ids[order]
        if len(ids) == 0:
            return {}
        starts = np.flatnonzero(np.r_[True, ids[1:] != ids[:-1]])
        ends = np.r_[starts[1:], len(ids)]
        return {int(ids[s]): order[s:e] for s, e in zip(starts, ends)}

    def counts_per_landmark(self):
        ids, counts = np.unique(self.landmark_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))


@dataclass
class ImuStream:
    """IMU samples; sample k acts over [timestamps[k], timestamps[k+1])."""
    timestamps: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("IMU timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    def window(self, start, stop):
        """Samples ticking from ``start`` up to ``stop`` as ``(gyro, accel, dt)`` arrays."""
        dt = self.timestamps[start + 1:stop + 1] - self.timestamps[start:stop]
        return self.gyro[start:stop], self.accel[start:stop], dt


@dataclass
class LoopPair:
    """Revisit of keyframe ``frame_m`` by ``frame_n``; ``measured`` = T_cm^-1 T_cn."""
    frame_m: int
    frame_n: int
    measured: Pose

    def __repr__(self):
        return f'<LoopPair {self.frame_m}-{self.frame_n}>'


@dataclass
class WorldPlane:
    """Ground-truth rectangular plane patch."""
    id: int
    plane: Plane
    kind: str  # horizontal | vertical | oblique
    center: np.ndarray
    axis_u: np.ndarray
    half_extents: tuple

    @property
    def axis_v(self):
        return np.cross(self.plane.normal, self.axis_u)

    @property
    def area(self):
        return 4.0 * self.half_extents[0] * self.half_extents[1]

    def local_coordinates(self, points):
        rel = np.asarray(points, dtype=float) - self.center
        return np.column_stack([rel @ self.axis_u, rel @ self.axis_v])

    def contains(self, points, margin=0.0):
        """In-patch test of the points' projection (ignores distance to the plane)."""
        uv = self.local_coordinates(points)
        return ((np.abs(uv[:, 0]) <= self.half_extents[0] + margin)
                & (np.abs(uv[:, 1]) <= self.half_extents[1] + margin))

    def sample(self, rng, count):
        s = rng.uniform(-1.0, 1.0, size=(count, 2))
        return (self.center
                + (s[:, :1] * self.half_extents[0]) * self.axis_u
                + (s[:, 1:] * self.half_extents[1]) * self.axis_v)

    def __repr__(self):
        return f'<WorldPlane {self.id} {self.kind}>'


@dataclass
class Dataset:
    """Synthetic sequence: ground truth, measurements and declared loops."""
    name: str
    spec: object  # the WorldSpec it was generated from
    rig: CameraRig
    gravity: np.ndarray
    keyframes: list  # ground-truth KeyframeState, ordered by id
    planes: list  # WorldPlane
    landmarks: list  # ground-truth Landmark
    observations: ObservationTable
    imu: ImuStream
    loops: list = field(default_factory=list)  # LoopPair

    def keyframe(self, keyframe_id):
        return self.keyframes[self._kf_rows()[keyframe_id]]

    def _kf_rows(self):
        return {kf.id: i for i, kf in enumerate(self.keyframes)}

    @property
    def planar_count(self):
        return sum(1 for lm in self.landmarks if lm.plane_id is not None)

    @property
    def nonplanar_count(self):
        return sum(1 for lm in self.landmarks if lm.plane_id is None)

    def __repr__(self):
        return f'<Dataset {self.name} kf={len(self.keyframes)} lm={len(self.landmarks)}>'


@dataclass
class MapPlane:
    """A plane in the map with its member landmarks."""
    id: int
    plane: Plane
    kind: str = 'vertical'
    members: set = field(default_factory=set)
    local_points: dict = field(default_factory=dict)  # keyframe id -> (N, 3) camera-frame points
    boundary: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    anchor_keyframe: Optional[int] = None

    def __repr__(self):
        return f'<MapPlane {self.id} members={len(self.members)}>'


@dataclass
class PlaneCandidateSet:
    """Landmarks near a plane awaiting or failing the consistency check."""
    plane_id: int
    failures: dict = field(default_factory=dict)  # landmark id -> failed checks
    rejected: set = field(default_factory=set)

    def record_failure(self, landmark_id, strikes):
        count = self.failures.get(landmark_id, 0) + 1
        self.failures[landmark_id] = count
        if count >= strikes:
            self.failures.pop(landmark_id)
            self.rejected.add(landmark_id)
        return count


@dataclass
class SlamMap:
    """Back-end map: keyframes, landmarks, observations, IMU factors and planes."""
    rig: CameraRig
    gravity: np.ndarray
    keyframes: dict  # id -> KeyframeState
    landmarks: dict  # id -> Landmark
    observations: ObservationTable
    preintegrations: list = field(default_factory=list)  # PreintegratedImu
    planes: dict = field(default_factory=dict)  # id -> MapPlane
    candidates: dict = field(default_factory=dict)  # plane id -> PlaneCandidateSet
    loop_pairs: list = field(default_factory=list)
    next_plane_id: int = 0

    def keyframe_ids(self):
        return sorted(self.keyframes)

    def planar_landmark_ids(self):
        return sorted(lm.id for lm in self.landmarks.values() if lm.plane_id is not None)

    def nonplanar_landmark_ids(self):
        return sorted(lm.id for lm in self.landmarks.values() if lm.plane_id is None)

    def add_plane(self, plane, kind='vertical'):
        map_plane = MapPlane(id=self.next_plane_id, plane=plane, kind=kind)
        self.planes[map_plane.id] = map_plane
        self.candidates[map_plane.id] = PlaneCandidateSet(map_plane.id)
        self.next_plane_id += 1
        return map_plane

    def remove_plane(self, plane_id):
        self.planes.pop(plane_id)
        self.candidates.pop(plane_id, None)

    def refresh_plane_points(self, plane_id=None):
        """Rebuild per-keyframe local point sets and anchors from current membership."""
        plane_ids = [plane_id] if plane_id is not None else list(self.planes)
        obs = self.observations
        for pid in plane_ids:
            plane = self.planes[pid]
            rows = np.flatnonzero(np.isin(obs.landmark_ids, list(plane.members)))
            plane.local_points = {}
            if len(rows) == 0:
                plane.anchor_keyframe = None
                continue
            points = obs.local_points(rows)
            kf = obs.keyframe_ids[rows]
            for k in np.unique(kf):
                plane.local_points[int(k)] = points[kf == k]
            plane.anchor_keyframe = int(kf.min())

    def update_from(self, states):
        """Copy keyframe, landmark and plane values present in ``states`` into the map."""
        R = states.rotation_matrices()
        for i, k in enumerate(states.keyframe_ids):
            kf = self.keyframes.get(int(k))
            if kf is None:
                continue
            kf.pose = Pose.from_rt(R[i], states.translations[i])
            kf.velocity = states.velocities[i].copy()
            kf.gyro_bias = states.gyro_biases[i].copy()
            kf.accel_bias = states.accel_biases[i].copy()
        for i, k in enumerate(states.landmark_ids):
            lm = self.landmarks.get(int(k))
            if lm is not None:
                lm.position = states.landmarks[i].copy()
        for k in states.plane_ids:
            if int(k) in self.planes:
                self.planes[int(k)].plane = states.plane(int(k))

    def __repr__(self):
        return f'<SlamMap kf={len(self.keyframes)} lm={len(self.landmarks)} planes={len(self.planes)}>'
