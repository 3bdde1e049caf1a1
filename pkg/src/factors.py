"""
Factor records, vectorised factor batches and measurement compression.

A batch evaluates every factor of one type in a single numpy pass and
returns whitened residuals ``(B, m)`` plus one Jacobian ``(B, m, dim)`` per
state slot. Jacobians are taken with respect to the IMU-frame keyframe
state; camera-frame derivatives are chained through the fixed extrinsic.

Usage:
    batch = ReprojDepthBatch.from_factors(factors, huber_delta=2.0)
    batch.bind(states)
    residuals, jacobians = batch.evaluate(states, states.frames())
"""

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from src.errors import EmptyPointSet, MixedKeys, PointBehindCamera
from src.geometry import (
    NormalizedImagePoint,
    Plane,
    Pose,
    cp_to_plane_batch,
    homography_with_jacobians,
    right_jacobian_inv,
    skew,
    so3_log,
)
from src.preintegration import imu_residual
from src.state import FactorEvaluation

MIN_DEPTH = 1e-6
EIGEN_CUTOFF = 1e-12

SLOT_DIMS = {'pose': 6, 'motion': 9, 'landmark': 3, 'plane': 3}


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def _check_sqrt_information(W, dim):
    W = np.asarray(W, dtype=float)
    if W.shape != (dim, dim) or not np.all(np.isfinite(W)):
        raise ValueError(f"square-root information must be a finite {dim}x{dim} matrix")
    try:
        np.linalg.cholesky(W.T @ W)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be symmetric positive definite")
    return _frozen(W)


def sqrt_information_from_covariance(covariance):
    """W with ``W.T @ W = inverse(covariance)``."""
    L = np.linalg.cholesky(np.asarray(covariance, dtype=float))
    return np.linalg.inv(L)


# --- records ---

@dataclass(frozen=True)
class ReprojDepthFactor:
    keyframe_id: int
    landmark_id: int
    observation: NormalizedImagePoint
    depth: float
    sigma_px: float = 1.0      # normalised image units
    sigma_depth: float = 1.0   # metres

    def __post_init__(self):
        if not self.depth > 0:
            raise ValueError("observed depth must be positive")
        if not (self.sigma_px > 0 and self.sigma_depth > 0):
            raise ValueError("noise sigmas must be positive")


@dataclass(frozen=True)
class HomographyPointFactor:
    frame_i: int
    frame_j: int
    plane_id: int
    point_i: NormalizedImagePoint
    point_j: NormalizedImagePoint
    sigma: float = 1.0

    @property
    def key(self):
        return (self.frame_i, self.frame_j, self.plane_id)

    def coefficients(self):
        C = homography_coefficients(self.point_i.as_array()[None], self.point_j.as_array()[None])[0]
        return C / self.sigma


@dataclass(frozen=True, eq=False)
class CompressedHomographyFactor:
    frame_i: int
    frame_j: int
    plane_id: int
    gram: np.ndarray     # 9x9
    factor: np.ndarray   # 9xr, factor @ factor.T == gram
    count: int

    @property
    def rank(self):
        return self.factor.shape[1]

    def residual_basis(self):
        """``factor.T`` padded with zero rows to 9x9."""
        Lt = np.zeros((9, 9))
        Lt[:self.rank] = self.factor.T
        return Lt


@dataclass(frozen=True)
class PointToPlaneFactor:
    keyframe_id: int
    plane_id: int
    point: tuple   # camera frame, metres
    sigma: float = 1.0


@dataclass(frozen=True, eq=False)
class CompressedPointToPlaneFactor:
    keyframe_id: int
    plane_id: int
    gram: np.ndarray     # 4x4
    factor: np.ndarray   # 4xr
    count: int

    @property
    def rank(self):
        return self.factor.shape[1]

    def residual_basis(self):
        Lt = np.zeros((4, 4))
        Lt[:self.rank] = self.factor.T
        return Lt


@dataclass(frozen=True, eq=False)
class RelativePoseFactor:
    """Measured camera-i-to-camera-j transform ``T_i^-1 T_j``; residual ``[t, theta]``."""

    frame_i: int
    frame_j: int
    measured: Pose
    sqrt_information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'sqrt_information', _check_sqrt_information(self.sqrt_information, 6))


@dataclass(frozen=True, eq=False)
class PosePlaneFactor:
    """Plane measured in camera ``keyframe_id``'s frame."""

    keyframe_id: int
    plane_id: int
    measured: Plane
    sqrt_information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'sqrt_information', _check_sqrt_information(self.sqrt_information, 3))


PosePlaneGraphFactor = Union[RelativePoseFactor, PosePlaneFactor]


# --- coefficient matrices and compression ---

def homography_coefficients(points_i, points_j):
    """
    Per-point 2x9 matrices C with ``C @ vec(H) = 0`` when ``p_j ~ H p_i``.
    ``vec`` is row-major.
    """
    points_i = np.asarray(points_i, dtype=float).reshape(-1, 2)
    points_j = np.asarray(points_j, dtype=float).reshape(-1, 2)
    xi, yi = points_i[:, 0], points_i[:, 1]
    xj, yj = points_j[:, 0], points_j[:, 1]
    C = np.zeros((len(points_i), 2, 9))
    C[:, 0, 0] = xi
    C[:, 0, 1] = yi
    C[:, 0, 2] = 1.0
    C[:, 0, 6] = -xi * xj
    C[:, 0, 7] = -yi * xj
    C[:, 0, 8] = -xj
    C[:, 1, 3] = xi
    C[:, 1, 4] = yi
    C[:, 1, 5] = 1.0
    C[:, 1, 6] = -xi * yj
    C[:, 1, 7] = -yi * yj
    C[:, 1, 8] = -yj
    return C


def homogeneous_points(points, sigma=1.0):
    """Rows ``[p; 1] / sigma`` shaped (N, 1, 4)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    rows = np.hstack([points, np.ones((len(points), 1))]) / sigma
    return rows[:, None, :]


def low_rank_factor(gram, cutoff=EIGEN_CUTOFF):
    """
    Batched eigen-factorisation ``gram = L @ L.T``.

    Eigenvalues at or below ``cutoff * max_eigenvalue`` are dropped; their
    columns of ``L`` are zero. Returns ``(L, rank)`` with ``L`` shaped like
    ``gram``.
    """
    gram = np.asarray(gram, dtype=float)
    single = gram.ndim == 2
    if single:
        gram = gram[None]
    w, V = np.linalg.eigh(gram)
    wmax = w.max(axis=-1, keepdims=True)
    keep = (w > cutoff * wmax) & (wmax > 0)
    scale = np.sqrt(np.where(keep, w, 0.0))
    L = V * scale[:, None, :]
    # most significant columns first
    L = L[:, :, ::-1]
    rank = keep.sum(axis=-1)
    if single:
        return L[0], int(rank[0])
    return L, rank


def accumulate_grams(coefficients, groups, n_groups):
    """``G_g = sum_l C_l^T C_l`` over the rows of each group."""
    coefficients = np.asarray(coefficients, dtype=float)
    k = coefficients.shape[-1]
    G = np.zeros((n_groups, k, k))
    if len(coefficients) == 0:
        return G
    outer = np.einsum('nri,nrj->nij', coefficients, coefficients)
    order = np.argsort(groups, kind='stable')
    sorted_groups = np.asarray(groups)[order]
    starts = np.flatnonzero(np.r_[True, sorted_groups[1:] != sorted_groups[:-1]])
    sums = np.add.reduceat(outer[order], starts, axis=0)
    G[sorted_groups[starts]] = sums
    return 0.5 * (G + np.swapaxes(G, 1, 2))


def build_compressed_homography(point_factors, cutoff=EIGEN_CUTOFF):
    """
    Merge per-point homography factors sharing (i, j, plane) into one.

    Raises:
        EmptyPointSet: no factors
        MixedKeys: factors do not share their keys
    """
    point_factors = list(point_factors)
    if not point_factors:
        raise EmptyPointSet("cannot compress an empty set of homography factors")
    keys = {f.key for f in point_factors}
    if len(keys) != 1:
        raise MixedKeys(f"homography factors span several keys: {sorted(keys)}")
    C = np.stack([f.coefficients() for f in point_factors])
    G = accumulate_grams(C, np.zeros(len(C), dtype=np.int64), 1)[0]
    L, rank = low_rank_factor(G, cutoff)
    frame_i, frame_j, plane_id = keys.pop()
    return CompressedHomographyFactor(
        frame_i=frame_i,
        frame_j=frame_j,
        plane_id=plane_id,
        gram=_frozen(G),
        factor=_frozen(L[:, :rank]),
        count=len(point_factors),
    )


def build_compressed_point_to_plane(points, keyframe_id, plane_id, sigma=1.0, cutoff=EIGEN_CUTOFF):
    """
    Merge local points of one plane seen in one keyframe.

    Raises:
        EmptyPointSet: no points
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise EmptyPointSet(f"keyframe {keyframe_id} has no points on plane {plane_id}")
    G = accumulate_grams(homogeneous_points(points, sigma), np.zeros(len(points), dtype=np.int64), 1)[0]
    L, rank = low_rank_factor(G, cutoff)
    return CompressedPointToPlaneFactor(
        keyframe_id=keyframe_id,
        plane_id=plane_id,
        gram=_frozen(G),
        factor=_frozen(L[:, :rank]),
        count=len(points),
    )


# --- batches ---

class Slot(NamedTuple):
    kind: str
    ids: np.ndarray


def _camera_to_body(J_t, J_theta, lever):
    """Chain ``[dt_c, dtheta_c]`` Jacobians onto the body pose increment."""
    return np.concatenate([J_t, J_theta - J_t @ skew(lever)], axis=-1)


def _whiten(W, r, jacobians):
    r = np.einsum('bij,bj->bi', W, r)
    if jacobians is None:
        return r, None
    return r, [W @ J for J in jacobians]


class FactorBatch:
    """Base class: subclasses set ``name``/``residual_dim`` and implement ``slots`` and ``_evaluate``."""

    name = 'factor'
    residual_dim = 0

    def __init__(self, huber_delta=None):
        self.huber_delta = huber_delta
        self.invalid_count = 0
        self._index = None

    def __len__(self):
        return len(self.slots()[0].ids)

    def slots(self):
        raise NotImplementedError

    def bind(self, states):
        """Resolve entity ids to state rows; raises MissingState."""
        lookup = {
            'pose': states.keyframe_indices,
            'motion': states.keyframe_indices,
            'landmark': states.landmark_indices,
            'plane': states.plane_indices,
        }
        self._index = [lookup[slot.kind](slot.ids) for slot in self.slots()]
        return self

    def indices(self):
        if self._index is None:
            raise RuntimeError(f"{self.name} batch is not bound to a state vector")
        return self._index

    def evaluate(self, states, frames=None, jacobians=True):
        if len(self) == 0:
            m = self.residual_dim
            return np.zeros((0, m)), [np.zeros((0, m, SLOT_DIMS[s.kind])) for s in self.slots()] if jacobians else None
        if self._index is None:
            self.bind(states)
        frames = frames if frames is not None else states.frames()
        return self._evaluate(states, frames, jacobians)

    def _evaluate(self, states, frames, jacobians):
        raise NotImplementedError


class ReprojDepthBatch(FactorBatch):
    """Projection (2) and depth (1) residuals of landmarks in keyframe cameras."""

    name = 'reproj_depth'
    residual_dim = 3

    def __init__(self, keyframe_ids, landmark_ids, observations, depths,
                 sigma_px=1.0, sigma_depth=1.0, huber_delta=None):
        super().__init__(huber_delta)
        self.keyframe_ids = np.asarray(keyframe_ids, dtype=np.int64).reshape(-1)
        self.landmark_ids = np.asarray(landmark_ids, dtype=np.int64).reshape(-1)
        self.observations = _frozen(np.asarray(observations, dtype=float).reshape(-1, 2))
        self.depths = _frozen(np.asarray(depths, dtype=float).reshape(-1))
        n = len(self.keyframe_ids)
        self.sigma_px = _frozen(np.broadcast_to(np.asarray(sigma_px, dtype=float), (n,)))
        self.sigma_depth = _frozen(np.broadcast_to(np.asarray(sigma_depth, dtype=float), (n,)))

    @classmethod
    def from_factors(cls, factors, huber_delta=None):
        factors = list(factors)
        return cls(
            [f.keyframe_id for f in factors],
            [f.landmark_id for f in factors],
            [f.observation.as_array() for f in factors] or np.zeros((0, 2)),
            [f.depth for f in factors],
            [f.sigma_px for f in factors],
            [f.sigma_depth for f in factors],
            huber_delta=huber_delta,
        )

    def slots(self):
        return [Slot('pose', self.keyframe_ids), Slot('landmark', self.landmark_ids)]

    def _evaluate(self, states, frames, jacobians):
        k, l = self.indices()
        R = frames.R_wc[k]
        diff = states.landmarks[l] - frames.t_wc[k]
        P = np.einsum('bji,bj->bi', R, diff)
        z = P[:, 2]
        valid = z > MIN_DEPTH
        self.invalid_count = int(np.count_nonzero(~valid))
        zs = np.where(valid, z, 1.0)

        r = np.empty((len(k), 3))
        r[:, :2] = (P[:, :2] / zs[:, None] - self.observations) / self.sigma_px[:, None]
        r[:, 2] = (z - self.depths) / self.sigma_depth
        r[~valid] = 0.0
        if not jacobians:
            return r, None

        Jp = np.zeros((len(k), 3, 3))
        Jp[:, 0, 0] = 1.0 / zs
        Jp[:, 0, 2] = -P[:, 0] / zs ** 2
        Jp[:, 1, 1] = 1.0 / zs
        Jp[:, 1, 2] = -P[:, 1] / zs ** 2
        Jp[:, 2, 2] = 1.0
        Jp[:, :2] /= self.sigma_px[:, None, None]
        Jp[:, 2] /= self.sigma_depth[:, None]
        Jp[~valid] = 0.0

        RT = np.swapaxes(R, 1, 2)
        J_landmark = Jp @ RT
        J_pose = _camera_to_body(-J_landmark, J_landmark @ skew(diff), frames.lever[k])
        return r, [J_pose, J_landmark]


class ImuBatch(FactorBatch):
    """Preintegrated IMU factors between keyframe pairs, whitened by their covariance."""

    name = 'imu'
    residual_dim = 15

    def __init__(self, factors):
        super().__init__(None)
        self.factors = list(factors)
        self.frame_i = np.array([f.frame_i for f in self.factors], dtype=np.int64)
        self.frame_j = np.array([f.frame_j for f in self.factors], dtype=np.int64)

    def slots(self):
        return [Slot('pose', self.frame_i), Slot('motion', self.frame_i),
                Slot('pose', self.frame_j), Slot('motion', self.frame_j)]

    def _evaluate(self, states, frames, jacobians):
        i_idx, _, j_idx, _ = self.indices()
        B = len(self.factors)
        r = np.empty((B, 15))
        J = [np.empty((B, 15, 6)), np.empty((B, 15, 9)), np.empty((B, 15, 6)), np.empty((B, 15, 9))]
        R = frames.R_wi
        for b, factor in enumerate(self.factors):
            i, j = i_idx[b], j_idx[b]
            res, jac = imu_residual(
                factor,
                R[i], states.translations[i], states.velocities[i], states.gyro_biases[i], states.accel_biases[i],
                R[j], states.translations[j], states.velocities[j], states.gyro_biases[j], states.accel_biases[j],
                jacobians=jacobians,
            )
            W = factor.sqrt_information
            r[b] = W @ res
            if jacobians:
                J[0][b] = W @ jac['pose_i']
                J[1][b] = W @ jac['motion_i']
                J[2][b] = W @ jac['pose_j']
                J[3][b] = W @ jac['motion_j']
        return r, (J if jacobians else None)


class _HomographyBase(FactorBatch):
    residual_dim = 2

    def slots(self):
        return [Slot('pose', self.frame_i), Slot('pose', self.frame_j), Slot('plane', self.plane_ids)]

    def _basis(self):
        raise NotImplementedError

    def _evaluate(self, states, frames, jacobians):
        i, j, p = self.indices()
        H, dH = homography_with_jacobians(
            frames.R_wc[i], frames.t_wc[i], frames.R_wc[j], frames.t_wc[j],
            states.planes[p], jacobians=jacobians,
        )
        basis = self._basis()
        r = np.einsum('bmk,bk->bm', basis, H.reshape(len(i), 9))
        if not jacobians:
            return r, None
        J = basis @ dH
        J_pose_i = _camera_to_body(J[..., 0:3], J[..., 3:6], frames.lever[i])
        J_pose_j = _camera_to_body(J[..., 6:9], J[..., 9:12], frames.lever[j])
        return r, [J_pose_i, J_pose_j, J[..., 12:15]]


class HomographyPointBatch(_HomographyBase):
    """Per-point homography residuals ``C_l @ vec(H)``."""

    name = 'homography_point'

    def __init__(self, frame_i, frame_j, plane_ids, points_i, points_j, sigma=1.0, huber_delta=None):
        super().__init__(huber_delta)
        self.frame_i = np.asarray(frame_i, dtype=np.int64).reshape(-1)
        self.frame_j = np.asarray(frame_j, dtype=np.int64).reshape(-1)
        self.plane_ids = np.asarray(plane_ids, dtype=np.int64).reshape(-1)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (len(self.frame_i),))
        C = homography_coefficients(points_i, points_j) / sigma[:, None, None]
        self.coefficients = _frozen(C)

    @classmethod
    def from_factors(cls, factors, huber_delta=None):
        factors = list(factors)
        return cls(
            [f.frame_i for f in factors], [f.frame_j for f in factors], [f.plane_id for f in factors],
            [f.point_i.as_array() for f in factors] or np.zeros((0, 2)),
            [f.point_j.as_array() for f in factors] or np.zeros((0, 2)),
            [f.sigma for f in factors], huber_delta=huber_delta,
        )

    def _basis(self):
        return self.coefficients


class CompressedHomographyBatch(_HomographyBase):
    """Compressed homography residuals ``L^T @ vec(H)``, zero-padded to 9 rows."""

    name = 'compressed_homography'
    residual_dim = 9

    def __init__(self, frame_i, frame_j, plane_ids, grams, counts, cutoff=EIGEN_CUTOFF):
        super().__init__(None)
        self.frame_i = np.asarray(frame_i, dtype=np.int64).reshape(-1)
        self.frame_j = np.asarray(frame_j, dtype=np.int64).reshape(-1)
        self.plane_ids = np.asarray(plane_ids, dtype=np.int64).reshape(-1)
        self.grams = _frozen(np.asarray(grams, dtype=float).reshape(-1, 9, 9))
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        L, self.ranks = low_rank_factor(self.grams, cutoff) if len(self.grams) else (np.zeros((0, 9, 9)), np.zeros(0))
        self.basis = _frozen(np.swapaxes(L, 1, 2))

    @classmethod
    def from_factors(cls, factors):
        factors = list(factors)
        batch = cls([f.frame_i for f in factors], [f.frame_j for f in factors], [f.plane_id for f in factors],
                    [f.gram for f in factors] or np.zeros((0, 9, 9)), [f.count for f in factors])
        batch.basis = _frozen([f.residual_basis() for f in factors] or np.zeros((0, 9, 9)))
        return batch

    @classmethod
    def from_points(cls, frame_i, frame_j, plane_ids, group, points_i, points_j, sigma=1.0, cutoff=EIGEN_CUTOFF):
        """
        Compress per-point observations in one pass.

        ``group[l]`` indexes the (frame_i, frame_j, plane_id) row that point ``l`` belongs to.
        """
        group = np.asarray(group, dtype=np.int64)
        C = homography_coefficients(points_i, points_j) / sigma
        grams = accumulate_grams(C, group, len(frame_i))
        counts = np.bincount(group, minlength=len(frame_i))
        return cls(frame_i, frame_j, plane_ids, grams, counts, cutoff)

    def _basis(self):
        return self.basis


class _PointToPlaneBase(FactorBatch):

    def slots(self):
        return [Slot('pose', self.keyframe_ids), Slot('plane', self.plane_ids)]


class PointToPlaneBatch(_PointToPlaneBase):
    """Per-point distance of camera-frame points to a world plane."""

    name = 'point_to_plane'
    residual_dim = 1

    def __init__(self, keyframe_ids, plane_ids, points, sigma=1.0):
        super().__init__(None)
        self.keyframe_ids = np.asarray(keyframe_ids, dtype=np.int64).reshape(-1)
        self.plane_ids = np.asarray(plane_ids, dtype=np.int64).reshape(-1)
        self.points = _frozen(np.asarray(points, dtype=float).reshape(-1, 3))
        self.sigma = _frozen(np.broadcast_to(np.asarray(sigma, dtype=float), (len(self.keyframe_ids),)))

    @classmethod
    def from_factors(cls, factors):
        factors = list(factors)
        return cls([f.keyframe_id for f in factors], [f.plane_id for f in factors],
                    [f.point for f in factors] or np.zeros((0, 3)), [f.sigma for f in factors])

    def _evaluate(self, states, frames, jacobians):
        k, p = self.indices()
        n, d, dn, dd = cp_to_plane_batch(states.planes[p])
        Rp = np.einsum('bij,bj->bi', frames.R_wc[k], self.points)
        Pw = Rp + frames.t_wc[k]
        inv_sigma = 1.0 / self.sigma
        r = ((np.einsum('bi,bi->b', n, Pw) + d) * inv_sigma)[:, None]
        if not jacobians:
            return r, None
        J_t = (n * inv_sigma[:, None])[:, None, :]
        J_theta = -(np.einsum('bi,bij->bj', n, skew(Rp)) * inv_sigma[:, None])[:, None, :]
        J_plane = ((np.einsum('bi,bik->bk', Pw, dn) + dd) * inv_sigma[:, None])[:, None, :]
        return r, [_camera_to_body(J_t, J_theta, frames.lever[k]), J_plane]


class CompressedPointToPlaneBatch(_PointToPlaneBase):
    """Compressed point-to-plane residuals ``L^T @ [R^T n; n.t + d]``, padded to 4 rows."""

    name = 'compressed_point_to_plane'
    residual_dim = 4

    def __init__(self, keyframe_ids, plane_ids, grams, counts, cutoff=EIGEN_CUTOFF):
        super().__init__(None)
        self.keyframe_ids = np.asarray(keyframe_ids, dtype=np.int64).reshape(-1)
        self.plane_ids = np.asarray(plane_ids, dtype=np.int64).reshape(-1)
        self.grams = _frozen(np.asarray(grams, dtype=float).reshape(-1, 4, 4))
        self.counts = np.asarray(counts, dtype=np.int64).reshape(-1)
        L, self.ranks = low_rank_factor(self.grams, cutoff) if len(self.grams) else (np.zeros((0, 4, 4)), np.zeros(0))
        self.basis = _frozen(np.swapaxes(L, 1, 2))

    @classmethod
    def from_factors(cls, factors):
        factors = list(factors)
        batch = cls([f.keyframe_id for f in factors], [f.plane_id for f in factors],
                    [f.gram for f in factors] or np.zeros((0, 4, 4)), [f.count for f in factors])
        batch.basis = _frozen([f.residual_basis() for f in factors] or np.zeros((0, 4, 4)))
        return batch

    @classmethod
    def from_points(cls, keyframe_ids, plane_ids, group, points, sigma=1.0, cutoff=EIGEN_CUTOFF):
        group = np.asarray(group, dtype=np.int64)
        grams = accumulate_grams(homogeneous_points(points, sigma), group, len(keyframe_ids))
        counts = np.bincount(group, minlength=len(keyframe_ids))
        return cls(keyframe_ids, plane_ids, grams, counts, cutoff)

    def _evaluate(self, states, frames, jacobians):
        k, p = self.indices()
        B = len(k)
        n, d, dn, dd = cp_to_plane_batch(states.planes[p])
        R = frames.R_wc[k]
        t = frames.t_wc[k]
        RT = np.swapaxes(R, 1, 2)
        v = np.empty((B, 4))
        v[:, :3] = np.einsum('bji,bj->bi', R, n)
        v[:, 3] = np.einsum('bi,bi->b', n, t) + d
        r = np.einsum('bmk,bk->bm', self.basis, v)
        if not jacobians:
            return r, None

        dv_t = np.zeros((B, 4, 3))
        dv_t[:, 3, :] = n
        dv_theta = np.zeros((B, 4, 3))
        dv_theta[:, :3, :] = RT @ skew(n)
        dv_eta = np.empty((B, 4, 3))
        dv_eta[:, :3, :] = RT @ dn
        dv_eta[:, 3, :] = np.einsum('bi,bik->bk', t, dn) + dd

        J_pose = _camera_to_body(self.basis @ dv_t, self.basis @ dv_theta, frames.lever[k])
        return r, [J_pose, self.basis @ dv_eta]


class RelativePoseBatch(FactorBatch):
    """Relative camera-pose edges, residual ``[t, Log R]`` of ``(T_i^-1 T_j) Z^-1``."""

    name = 'relative_pose'
    residual_dim = 6

    def __init__(self, factors):
        super().__init__(None)
        factors = list(factors)
        self.frame_i = np.array([f.frame_i for f in factors], dtype=np.int64)
        self.frame_j = np.array([f.frame_j for f in factors], dtype=np.int64)
        self.Z_R = _frozen([f.measured.R for f in factors] or np.zeros((0, 3, 3)))
        self.Z_t = _frozen([f.measured.translation for f in factors] or np.zeros((0, 3)))
        self.sqrt_information = _frozen([f.sqrt_information for f in factors] or np.zeros((0, 6, 6)))

    def slots(self):
        return [Slot('pose', self.frame_i), Slot('pose', self.frame_j)]

    def _evaluate(self, states, frames, jacobians):
        i, j = self.indices()
        B = len(i)
        R_i, t_i = frames.R_wc[i], frames.t_wc[i]
        R_j, t_j = frames.R_wc[j], frames.t_wc[j]
        RiT = np.swapaxes(R_i, 1, 2)
        ZRT = np.swapaxes(self.Z_R, 1, 2)
        m = np.einsum('bij,bj->bi', R_j @ ZRT, self.Z_t)
        w = t_j - t_i - m
        r_t = np.einsum('bij,bj->bi', RiT, w)
        r_theta = so3_log(RiT @ R_j @ ZRT)
        r = np.concatenate([r_t, r_theta], axis=1)
        if not jacobians:
            return _whiten(self.sqrt_information, r, None)

        A = right_jacobian_inv(r_theta) @ self.Z_R @ np.swapaxes(R_j, 1, 2)
        J_i = np.zeros((B, 6, 6))
        J_i[:, :3, :3] = -RiT
        J_i[:, :3, 3:] = RiT @ skew(w)
        J_i[:, 3:, 3:] = -A
        J_j = np.zeros((B, 6, 6))
        J_j[:, :3, :3] = RiT
        J_j[:, :3, 3:] = RiT @ skew(m)
        J_j[:, 3:, 3:] = A
        J_i = _camera_to_body(J_i[..., :3], J_i[..., 3:], frames.lever[i])
        J_j = _camera_to_body(J_j[..., :3], J_j[..., 3:], frames.lever[j])
        return _whiten(self.sqrt_information, r, [J_i, J_j])


class PosePlaneBatch(FactorBatch):
    """Pose-plane edges, residual ``eta_world - eta(T_c * measured)``."""

    name = 'pose_plane'
    residual_dim = 3

    def __init__(self, factors):
        super().__init__(None)
        factors = list(factors)
        self.keyframe_ids = np.array([f.keyframe_id for f in factors], dtype=np.int64)
        self.plane_ids = np.array([f.plane_id for f in factors], dtype=np.int64)
        self.normals = _frozen([f.measured.normal for f in factors] or np.zeros((0, 3)))
        self.distances = _frozen([f.measured.distance for f in factors])
        self.sqrt_information = _frozen([f.sqrt_information for f in factors] or np.zeros((0, 3, 3)))

    def slots(self):
        return [Slot('pose', self.keyframe_ids), Slot('plane', self.plane_ids)]

    def _evaluate(self, states, frames, jacobians):
        k, p = self.indices()
        B = len(k)
        t = frames.t_wc[k]
        n_w = np.einsum('bij,bj->bi', frames.R_wc[k], self.normals)
        d_w = self.distances - np.einsum('bi,bi->b', n_w, t)
        eta_meas = n_w * d_w[:, None]
        r = states.planes[p] - eta_meas
        if not jacobians:
            return _whiten(self.sqrt_information, r, None)

        n_skew = skew(n_w)
        d_eta_dtheta = -n_skew * d_w[:, None, None] + n_w[:, :, None] * np.einsum('bi,bij->bj', t, n_skew)[:, None, :]
        d_eta_dt = -n_w[:, :, None] * n_w[:, None, :]
        J_pose = _camera_to_body(-d_eta_dt, -d_eta_dtheta, frames.lever[k])
        J_plane = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
        return _whiten(self.sqrt_information, r, [J_pose, J_plane])


# --- single-factor evaluation ---

def _single(batch, states, names):
    batch.bind(states)
    r, J = batch.evaluate(states)
    return FactorEvaluation(r[0].copy(), {name: jac[0].copy() for name, jac in zip(names, J)})


def eval_reproj_depth(factor, states):
    """
    Unwhitened ``[proj - obs, z - depth]`` with Jacobians for ``pose`` and ``landmark``.

    Raises:
        PointBehindCamera: landmark depth in the camera is at most 1e-6
    """
    batch = ReprojDepthBatch([factor.keyframe_id], [factor.landmark_id],
                             factor.observation.as_array()[None], [factor.depth])
    result = _single(batch, states, ('pose', 'landmark'))
    if batch.invalid_count:
        raise PointBehindCamera(
            f"landmark {factor.landmark_id} is behind keyframe {factor.keyframe_id}"
        )
    return result


def eval_homography_point(factor, states):
    batch = HomographyPointBatch([factor.frame_i], [factor.frame_j], [factor.plane_id],
                                 factor.point_i.as_array()[None], factor.point_j.as_array()[None],
                                 sigma=factor.sigma)
    return _single(batch, states, ('pose_i', 'pose_j', 'plane'))


def eval_compressed_homography(factor, states):
    result = _single(CompressedHomographyBatch.from_factors([factor]), states, ('pose_i', 'pose_j', 'plane'))
    r = factor.rank
    return FactorEvaluation(result.residual[:r], {k: v[:r] for k, v in result.jacobians.items()})


def eval_point_to_plane(factor, states):
    return _single(PointToPlaneBatch.from_factors([factor]), states, ('pose', 'plane'))


def eval_compressed_point_to_plane(factor, states):
    result = _single(CompressedPointToPlaneBatch.from_factors([factor]), states, ('pose', 'plane'))
    r = factor.rank
    return FactorEvaluation(result.residual[:r], {k: v[:r] for k, v in result.jacobians.items()})


def eval_pose_plane_graph(factor, states):
    """Whitened residual of a relative-pose or pose-plane edge."""
    if isinstance(factor, RelativePoseFactor):
        return _single(RelativePoseBatch([factor]), states, ('pose_i', 'pose_j'))
    if isinstance(factor, PosePlaneFactor):
        return _single(PosePlaneBatch([factor]), states, ('pose', 'plane'))
    raise TypeError(f"not a pose-plane graph factor: {type(factor).__name__}")
