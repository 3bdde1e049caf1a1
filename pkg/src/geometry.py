"""
Rigid-body geometry, plane parameterisations and the two-view homography.

Conventions used throughout the package:

* Rotations are unit quaternions stored (w, x, y, z).
* A Pose maps points from its local frame into the parent frame:
  ``P_parent = R @ P_local + t``.
* Pose increments are 6-vectors ``[dt, dtheta]`` applied on the left:
  ``R <- Exp(dtheta) R``, ``t <- t + dt``.
* Planes satisfy ``n . P + d = 0``. The closest-point vector ``eta = n * d``
  is invariant to the (n, d) / (-n, -d) sign flip.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation as _ScipyRotation

from src.errors import DegeneratePlane, RayParallelToPlane

IDENTITY3 = np.eye(3)
SMALL_ANGLE = 1e-8
HOMOGRAPHY_EPS = 1e-9
UNIT_TOLERANCE = 4e-16  # already-unit inputs keep their exact bits


def skew(v):
    """Cross-product matrix of a 3-vector, or a stack of them."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


# [e_k]x for k = 0, 1, 2
SKEW_BASIS = skew(IDENTITY3)


def so3_exp(phi):
    """Rotation matrix (or stack) for rotation vector(s) ``phi``."""
    phi = np.asarray(phi, dtype=float)
    return _ScipyRotation.from_rotvec(phi.reshape(-1, 3)).as_matrix().reshape(phi.shape[:-1] + (3, 3))


def so3_log(R):
    """Rotation vector(s) for rotation matrix (or stack) ``R``."""
    R = np.asarray(R, dtype=float)
    return _ScipyRotation.from_matrix(R.reshape(-1, 3, 3)).as_rotvec().reshape(R.shape[:-2] + (3,))


def right_jacobian(phi):
    """Right Jacobian of SO(3), batched over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe ** 2)
    b = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe ** 3)
    return IDENTITY3 - a * K + b * K2


def right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3), batched over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    K2 = K @ K
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(
        small,
        1.0 / 12.0,
        1.0 / safe ** 2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return IDENTITY3 + 0.5 * K + b * K2


def quaternion_multiply(q1, q2):
    """Hamilton product of (w, x, y, z) quaternions, batched."""
    q1 = np.asarray(q1, dtype=float)
    q2 = np.asarray(q2, dtype=float)
    w1, v1 = q1[..., :1], q1[..., 1:]
    w2, v2 = q2[..., :1], q2[..., 1:]
    w = w1 * w2 - np.sum(v1 * v2, axis=-1, keepdims=True)
    v = w1 * v2 + w2 * v1 + np.cross(v1, v2)
    return np.concatenate([w, v], axis=-1)


def quaternion_to_matrix(q):
    """Rotation matrices for (w, x, y, z) quaternions, batched."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotvec_to_quaternion(phi):
    """(w, x, y, z) quaternions for rotation vectors, batched."""
    phi = np.asarray(phi, dtype=float)
    xyzw = _ScipyRotation.from_rotvec(phi.reshape(-1, 3)).as_quat()
    wxyz = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    return wxyz.reshape(phi.shape[:-1] + (4,))


def matrix_to_quaternion(R):
    R = np.asarray(R, dtype=float)
    xyzw = _ScipyRotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    wxyz = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    return wxyz.reshape(R.shape[:-2] + (4,))


def _frozen(array):
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion rotation, (w, x, y, z)."""

    quaternion: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float).reshape(4)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        if abs(norm - 1.0) > UNIT_TOLERANCE:
            q = q / norm
        object.__setattr__(self, 'quaternion', _frozen(q))

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_rotvec(cls, phi):
        return cls(rotvec_to_quaternion(np.asarray(phi, dtype=float).reshape(3)))

    @classmethod
    def from_matrix(cls, R):
        return cls(matrix_to_quaternion(np.asarray(R, dtype=float).reshape(3, 3)))

    def matrix(self):
        return quaternion_to_matrix(self.quaternion)

    def log(self):
        return so3_log(self.matrix())

    def compose(self, other):
        return Rotation(quaternion_multiply(self.quaternion, other.quaternion))

    def inverse(self):
        w, x, y, z = self.quaternion
        return Rotation(np.array([w, -x, -y, -z]))

    def rotate(self, v):
        return np.asarray(v, dtype=float) @ self.matrix().T

    def angle_to(self, other):
        """Geodesic angle in radians between two rotations."""
        return float(np.linalg.norm(self.inverse().compose(other).log()))

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return f"Rotation({np.array2string(self.quaternion, precision=6)})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping local-frame points into the parent frame."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, 'rotation', Rotation(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, 'translation', _frozen(t))

    @classmethod
    def identity(cls):
        return cls(Rotation.identity(), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t):
        return cls(Rotation.from_matrix(R), t)

    @property
    def R(self):
        return self.rotation.matrix()

    @property
    def t(self):
        return self.translation

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        return Pose(
            self.rotation.compose(other.rotation),
            self.rotation.rotate(other.translation) + self.translation,
        )

    def inverse(self):
        inv = self.rotation.inverse()
        return Pose(inv, -inv.rotate(self.translation))

    def act(self, points):
        """Transform point(s) from the local into the parent frame."""
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def __matmul__(self, other):
        return self.compose(other)

    def __repr__(self):
        return (f"Pose(q={np.array2string(self.rotation.quaternion, precision=6)}, "
                f"t={np.array2string(self.translation, precision=6)})")


def pose_boxplus(T, delta):
    """Left retraction of a pose by ``delta = [dt, dtheta]``."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return Pose(
        Rotation.from_rotvec(delta[3:]).compose(T.rotation),
        T.translation + delta[:3],
    )


def pose_boxminus(T2, T1):
    """Local coordinates of ``T2`` around ``T1``; inverse of ``pose_boxplus``."""
    dt = T2.translation - T1.translation
    dtheta = so3_log(T2.R @ T1.R.T)
    return np.concatenate([dt, dtheta])


def pose_retraction_jacobian(T):
    """
    Derivative of ``[t; q]`` (7 numbers) with respect to the 6-vector
    increment of ``pose_boxplus`` at zero.
    """
    w = T.rotation.quaternion[0]
    v = T.rotation.quaternion[1:]
    J = np.zeros((7, 6))
    J[:3, :3] = IDENTITY3
    J[3, 3:] = -0.5 * v
    J[4:, 3:] = 0.5 * (w * IDENTITY3 - skew(v))
    return J


@dataclass(frozen=True, eq=False)
class Plane:
    """Infinite plane ``normal . P + distance = 0``."""

    normal: np.ndarray
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float).reshape(3)
        scale = np.linalg.norm(n)
        if not np.isfinite(scale) or scale < 1e-12:
            raise DegeneratePlane("plane normal must be non-zero")
        if abs(scale - 1.0) <= UNIT_TOLERANCE:
            scale = 1.0
        object.__setattr__(self, 'normal', _frozen(n / scale))
        object.__setattr__(self, 'distance', float(self.distance) / scale)

    @property
    def n(self):
        return self.normal

    @property
    def d(self):
        return self.distance

    def vector(self):
        return np.concatenate([self.normal, [self.distance]])

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ self.normal + self.distance

    def project(self, points):
        """Orthogonal projection of point(s) onto the plane."""
        points = np.asarray(points, dtype=float)
        return points - self.signed_distance(points)[..., None] * self.normal

    def transform(self, T):
        return plane_transform(self, T)

    def flipped(self):
        return Plane(-self.normal, -self.distance)

    def to_cp(self):
        return PlaneCP(self.normal * self.distance)

    def same_as(self, other, atol=1e-9):
        """Equality up to the (n, d) / (-n, -d) ambiguity."""
        a, b = self.vector(), other.vector()
        return bool(np.allclose(a, b, atol=atol) or np.allclose(a, -b, atol=atol))

    def __repr__(self):
        return f"Plane(n={np.array2string(self.normal, precision=6)}, d={self.distance:.6g})"


@dataclass(frozen=True, eq=False)
class PlaneCP:
    """Closest-point plane parameterisation ``eta = n * d``."""

    eta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'eta', _frozen(np.asarray(self.eta, dtype=float).reshape(3)))

    def to_plane(self):
        d = float(np.linalg.norm(self.eta))
        if d < 1e-12:
            raise DegeneratePlane("closest-point vector is zero; plane passes through the origin")
        return Plane(self.eta / d, d)


def cp_boxplus(cp, delta):
    return PlaneCP(cp.eta + np.asarray(delta, dtype=float).reshape(3))


def cp_boxminus(cp2, cp1):
    return cp2.eta - cp1.eta


def cp_to_plane_batch(eta):
    """
    Planes and their derivatives for a stack of CP vectors.

    Returns ``(n, d, dn_deta, dd_deta)`` with shapes (B,3), (B,), (B,3,3), (B,3).
    """
    eta = np.asarray(eta, dtype=float)
    d = np.linalg.norm(eta, axis=-1)
    if np.any(d < 1e-12):
        raise DegeneratePlane("closest-point vector is zero; plane passes through the origin")
    n = eta / d[..., None]
    dn = (IDENTITY3 - n[..., :, None] * n[..., None, :]) / d[..., None, None]
    return n, d, dn, n.copy()


def plane_transform(plane, T):
    """
    Express ``plane`` in the frame reached by ``T``: if P satisfies ``plane``
    then ``T.act(P)`` satisfies the result.
    """
    n = T.rotation.rotate(plane.normal)
    return Plane(n, plane.distance - float(n @ T.translation))


def fit_plane(points):
    """Total least-squares plane through a point set (SVD of centred points)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    n = vt[-1]
    return Plane(n, -float(n @ centroid))


@dataclass(frozen=True)
class NormalizedImagePoint:
    """Point on the z = 1 image plane."""

    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("normalized image point must be finite")
        object.__setattr__(self, 'x', float(self.x))
        object.__setattr__(self, 'y', float(self.y))

    @classmethod
    def from_pixel(cls, u, v, K):
        p = np.linalg.solve(np.asarray(K, dtype=float), np.array([u, v, 1.0]))
        return cls(p[0] / p[2], p[1] / p[2])

    def bearing(self):
        return np.array([self.x, self.y, 1.0])

    def within(self, limit):
        return abs(self.x) <= limit and abs(self.y) <= limit

    def as_array(self):
        return np.array([self.x, self.y])


def homography_from_states(T_i, T_j, plane):
    """
    Homography taking normalised points of camera i to camera j for points on
    ``plane`` (world frame). ``T_i``/``T_j`` are camera-to-world poses.
    """
    n, d = plane.normal, plane.distance
    t_i, t_j = T_i.translation, T_j.translation
    denom = d + float(n @ t_i)
    if abs(denom) < HOMOGRAPHY_EPS:
        raise DegeneratePlane("camera i lies on the plane")
    M = IDENTITY3 - np.outer(t_i - t_j, n) / denom
    return T_j.R.T @ M @ T_i.R


def homography_with_jacobians(R_i, t_i, R_j, t_j, eta, jacobians=True):
    """
    Batched homography and its derivative.

    Args:
        R_i, t_i, R_j, t_j: camera-to-world rotations (B,3,3) and translations (B,3)
        eta: world-frame CP plane vectors (B,3)

    Returns:
        H (B,3,3) and, when requested, dH (B,9,15): derivative of the row-major
        flattening with respect to ``[dt_i, dtheta_i, dt_j, dtheta_j, deta]``.
    """
    n, d, dn, dd = cp_to_plane_batch(eta)
    a = t_i - t_j
    D = d + np.einsum('bi,bi->b', n, t_i)
    if np.any(np.abs(D) < HOMOGRAPHY_EPS):
        raise DegeneratePlane("camera i lies on the plane")

    an = a[:, :, None] * n[:, None, :]
    M = IDENTITY3 - an / D[:, None, None]
    RjT = np.swapaxes(R_j, 1, 2)
    MRi = M @ R_i
    H = RjT @ MRi
    if not jacobians:
        return H, None

    B = H.shape[0]
    Dk = D[:, None, None, None]
    RjT4 = RjT[:, None]
    Ri4 = R_i[:, None]

    # outer(e_k, n) for k = 0..2
    en = np.einsum('kp,bq->bkpq', IDENTITY3, n)

    dM_ti = -en / Dk + (n / D[:, None] ** 2)[:, :, None, None] * an[:, None]
    dH_ti = RjT4 @ dM_ti @ Ri4
    dH_thi = RjT4 @ M[:, None] @ SKEW_BASIS[None] @ Ri4
    dH_tj = RjT4 @ (en / Dk) @ Ri4
    dH_thj = -(RjT4 @ SKEW_BASIS[None] @ MRi[:, None])

    dD = dd + np.einsum('bqk,bq->bk', dn, t_i)
    dM_eta = (-np.einsum('bp,bqk->bkpq', a, dn) / Dk
              + an[:, None] * (dD / D[:, None] ** 2)[:, :, None, None])
    dH_eta = RjT4 @ dM_eta @ Ri4

    stacked = np.concatenate([dH_ti, dH_thi, dH_tj, dH_thj, dH_eta], axis=1)
    dH = np.moveaxis(stacked, 1, -1).reshape(B, 9, 15)
    return H, dH


def intersect_rays_with_planes(origins, directions, normals, distances, eps=1e-9):
    """
    Points ``o + s * r`` on planes ``n . P + d = 0``.

    Raises:
        RayParallelToPlane: when any ``|n . r|`` is below ``eps``
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    distances = np.atleast_1d(np.asarray(distances, dtype=float))
    nr = np.einsum('bi,bi->b', normals, directions)
    if np.any(np.abs(nr) < eps):
        raise RayParallelToPlane("viewing ray is parallel to the plane")
    s = -(distances + np.einsum('bi,bi->b', normals, origins)) / nr
    return origins + s[:, None] * directions
