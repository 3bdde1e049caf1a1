"""
Optimisation state: keyframe IMU states, landmark positions and CP planes.

Keyframe poses are IMU-body-to-world. Camera poses are derived through the
fixed ``body_to_camera`` extrinsic and never stored.
"""

from dataclasses import dataclass, field

import numpy as np

from src.errors import MissingState
from src.geometry import (
    Plane,
    PlaneCP,
    Pose,
    Rotation,
    UNIT_TOLERANCE,
    quaternion_multiply,
    quaternion_to_matrix,
    rotvec_to_quaternion,
)


@dataclass
class FactorEvaluation:
    """Residual of one factor and its Jacobians keyed by state block name."""

    residual: np.ndarray
    jacobians: dict = field(default_factory=dict)

    @property
    def cost(self):
        return 0.5 * float(self.residual @ self.residual)


@dataclass
class Frames:
    """Per-keyframe rotation matrices and positions of the body and the camera."""

    R_wi: np.ndarray
    t_wi: np.ndarray
    R_wc: np.ndarray
    t_wc: np.ndarray
    lever: np.ndarray  # R_wi @ t_ic


def _rows(values, width, name):
    array = np.array(values, dtype=float).reshape(-1, width) if np.size(values) else np.zeros((0, width))
    if not np.all(np.isfinite(array)):
        raise ValueError(f"{name} must be finite")
    return array


def _ids(values, name):
    ids = np.array(values, dtype=np.int64).reshape(-1)
    if len(np.unique(ids)) != len(ids):
        raise ValueError(f"duplicate {name} ids")
    return ids


@dataclass(eq=False)
class StateVector:
    keyframe_ids: np.ndarray
    quaternions: np.ndarray
    translations: np.ndarray
    velocities: np.ndarray
    gyro_biases: np.ndarray
    accel_biases: np.ndarray
    landmark_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    plane_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    planes: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    body_to_camera: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        self.keyframe_ids = _ids(self.keyframe_ids, 'keyframe')
        K = len(self.keyframe_ids)
        self.quaternions = _rows(self.quaternions, 4, 'quaternions')
        norms = np.linalg.norm(self.quaternions, axis=1, keepdims=True)
        # already-unit rows keep their exact bits
        self.quaternions = np.where(np.abs(norms - 1.0) > UNIT_TOLERANCE, self.quaternions / norms, self.quaternions)
        self.translations = _rows(self.translations, 3, 'translations')
        self.velocities = _rows(self.velocities, 3, 'velocities')
        self.gyro_biases = _rows(self.gyro_biases, 3, 'gyro_biases')
        self.accel_biases = _rows(self.accel_biases, 3, 'accel_biases')
        for name in ('quaternions', 'translations', 'velocities', 'gyro_biases', 'accel_biases'):
            if len(getattr(self, name)) != K:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows for {K} keyframes")

        self.landmark_ids = _ids(self.landmark_ids, 'landmark')
        self.landmarks = _rows(self.landmarks, 3, 'landmarks')
        if len(self.landmarks) != len(self.landmark_ids):
            raise ValueError("landmark ids and positions differ in length")

        self.plane_ids = _ids(self.plane_ids, 'plane')
        self.planes = _rows(self.planes, 3, 'planes')
        if len(self.planes) != len(self.plane_ids):
            raise ValueError("plane ids and parameters differ in length")

        self._kf_index = {int(k): i for i, k in enumerate(self.keyframe_ids)}
        self._lm_index = {int(k): i for i, k in enumerate(self.landmark_ids)}
        self._plane_index = {int(k): i for i, k in enumerate(self.plane_ids)}

    @classmethod
    def from_blocks(cls, keyframes, landmarks=None, planes=None, body_to_camera=None):
        """
        Build from records.

        Args:
            keyframes: iterable of objects with ``id, pose, velocity, gyro_bias, accel_bias``
            landmarks: mapping landmark id -> position
            planes: mapping plane id -> Plane
        """
        keyframes = sorted(keyframes, key=lambda kf: kf.id)
        landmarks = landmarks or {}
        planes = planes or {}
        lm_ids = sorted(landmarks)
        plane_ids = sorted(planes)
        return cls(
            keyframe_ids=[kf.id for kf in keyframes],
            quaternions=[kf.pose.rotation.quaternion for kf in keyframes],
            translations=[kf.pose.translation for kf in keyframes],
            velocities=[kf.velocity for kf in keyframes],
            gyro_biases=[kf.gyro_bias for kf in keyframes],
            accel_biases=[kf.accel_bias for kf in keyframes],
            landmark_ids=lm_ids,
            landmarks=[landmarks[i] for i in lm_ids],
            plane_ids=plane_ids,
            planes=[planes[i].to_cp().eta for i in plane_ids],
            body_to_camera=body_to_camera or Pose.identity(),
        )

    @property
    def num_keyframes(self):
        return len(self.keyframe_ids)

    @property
    def num_landmarks(self):
        return len(self.landmark_ids)

    @property
    def num_planes(self):
        return len(self.plane_ids)

    # --- lookups ---

    def keyframe_index(self, keyframe_id):
        try:
            return self._kf_index[int(keyframe_id)]
        except KeyError:
            raise MissingState(f"keyframe {keyframe_id} is not in the state")

    def landmark_index(self, landmark_id):
        try:
            return self._lm_index[int(landmark_id)]
        except KeyError:
            raise MissingState(f"landmark {landmark_id} is not in the state")

    def plane_index(self, plane_id):
        try:
            return self._plane_index[int(plane_id)]
        except KeyError:
            raise MissingState(f"plane {plane_id} is not in the state")

    def keyframe_indices(self, ids):
        return np.array([self.keyframe_index(i) for i in ids], dtype=np.int64)

    def landmark_indices(self, ids):
        return np.array([self.landmark_index(i) for i in ids], dtype=np.int64)

    def plane_indices(self, ids):
        return np.array([self.plane_index(i) for i in ids], dtype=np.int64)

    def has_keyframe(self, keyframe_id):
        return int(keyframe_id) in self._kf_index

    def has_landmark(self, landmark_id):
        return int(landmark_id) in self._lm_index

    def has_plane(self, plane_id):
        return int(plane_id) in self._plane_index

    def pose(self, keyframe_id):
        i = self.keyframe_index(keyframe_id)
        return Pose(Rotation(self.quaternions[i]), self.translations[i])

    def camera_pose(self, keyframe_id):
        return self.pose(keyframe_id).compose(self.body_to_camera)

    def motion(self, keyframe_id):
        i = self.keyframe_index(keyframe_id)
        return self.velocities[i].copy(), self.gyro_biases[i].copy(), self.accel_biases[i].copy()

    def landmark(self, landmark_id):
        return self.landmarks[self.landmark_index(landmark_id)].copy()

    def plane(self, plane_id):
        return PlaneCP(self.planes[self.plane_index(plane_id)]).to_plane()

    def rotation_matrices(self):
        return quaternion_to_matrix(self.quaternions)

    def frames(self):
        R_wi = self.rotation_matrices()
        R_ic = self.body_to_camera.R
        lever = R_wi @ self.body_to_camera.translation
        return Frames(
            R_wi=R_wi,
            t_wi=self.translations,
            R_wc=R_wi @ R_ic,
            t_wc=self.translations + lever,
            lever=lever,
        )

    # --- updates ---

    def copy(self):
        return StateVector(
            keyframe_ids=self.keyframe_ids.copy(),
            quaternions=self.quaternions.copy(),
            translations=self.translations.copy(),
            velocities=self.velocities.copy(),
            gyro_biases=self.gyro_biases.copy(),
            accel_biases=self.accel_biases.copy(),
            landmark_ids=self.landmark_ids.copy(),
            landmarks=self.landmarks.copy(),
            plane_ids=self.plane_ids.copy(),
            planes=self.planes.copy(),
            body_to_camera=self.body_to_camera,
        )

    def retract_poses(self, indices, deltas):
        """Left retraction of poses at ``indices`` by rows ``[dt, dtheta]``."""
        if len(indices) == 0:
            return
        deltas = np.asarray(deltas, dtype=float).reshape(-1, 6)
        dq = rotvec_to_quaternion(deltas[:, 3:])
        q = quaternion_multiply(dq, self.quaternions[indices])
        self.quaternions[indices] = q / np.linalg.norm(q, axis=1, keepdims=True)
        self.translations[indices] += deltas[:, :3]

    def retract_motion(self, indices, deltas):
        """Additive update of ``[v, bg, ba]`` rows."""
        if len(indices) == 0:
            return
        deltas = np.asarray(deltas, dtype=float).reshape(-1, 9)
        self.velocities[indices] += deltas[:, 0:3]
        self.gyro_biases[indices] += deltas[:, 3:6]
        self.accel_biases[indices] += deltas[:, 6:9]

    def retract_landmarks(self, indices, deltas):
        if len(indices) == 0:
            return
        self.landmarks[indices] += np.asarray(deltas, dtype=float).reshape(-1, 3)

    def retract_planes(self, indices, deltas):
        if len(indices) == 0:
            return
        self.planes[indices] += np.asarray(deltas, dtype=float).reshape(-1, 3)

    def set_pose(self, keyframe_id, pose):
        i = self.keyframe_index(keyframe_id)
        self.quaternions[i] = pose.rotation.quaternion
        self.translations[i] = pose.translation

    def set_plane(self, plane_id, plane):
        self.planes[self.plane_index(plane_id)] = plane.to_cp().eta

    def with_landmarks(self, ids, positions):
        """Copy with landmarks added (or overwritten when the id exists)."""
        out = self.copy()
        ids = list(ids)
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        new_ids, new_positions = [], []
        for landmark_id, position in zip(ids, positions):
            if out.has_landmark(landmark_id):
                out.landmarks[out.landmark_index(landmark_id)] = position
            else:
                new_ids.append(landmark_id)
                new_positions.append(position)
        if not new_ids:
            return out
        return StateVector(
            keyframe_ids=out.keyframe_ids,
            quaternions=out.quaternions,
            translations=out.translations,
            velocities=out.velocities,
            gyro_biases=out.gyro_biases,
            accel_biases=out.accel_biases,
            landmark_ids=np.concatenate([out.landmark_ids, np.array(new_ids, dtype=np.int64)]),
            landmarks=np.vstack([out.landmarks, np.array(new_positions)]),
            plane_ids=out.plane_ids,
            planes=out.planes,
            body_to_camera=out.body_to_camera,
        )

    def positions(self):
        """Keyframe id -> body position."""
        return {int(k): self.translations[i].copy() for i, k in enumerate(self.keyframe_ids)}
