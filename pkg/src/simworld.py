"""
Synthetic indoor world: a furnished rectangular room, a smooth trajectory,
IMU samples, keyframe observations with depth, and declared loop pairs.

Ground-truth keyframe states are obtained by integrating the noise-free IMU
samples with the same discrete scheme the preintegration uses, so on a
zero-noise dataset every factor residual vanishes at ground truth.

Usage:
    spec = WorldSpec.preset('full')
    dataset = generate(spec)
    initial = perturb(StateVector.from_blocks(dataset.keyframes), 0.1, 0.01, seed=1)
"""

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation as ScipyRotation

from src.errors import InfeasibleTrajectory, LengthMismatch, WorldSpecError
from src.geometry import Plane, Pose, Rotation, so3_exp
from src.logging_config import get_logger
from src.models import (
    CameraRig,
    Dataset,
    ImuStream,
    KeyframeState,
    Landmark,
    LoopPair,
    ObservationTable,
    WorldPlane,
)

log = get_logger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])

# camera axes expressed in the IMU body frame: looking along body x
R_IMU_CAMERA = np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
])
T_IMU_CAMERA = np.array([0.05, 0.0, 0.02])

MIN_PLANE_OFFSET = 0.2
PLANE_CLEARANCE = 0.2
PLANE_CLEARANCE_PAD = 0.3
PATH_CLEARANCE = 0.8
MAX_TRACK = 12
LOOP_MIN_GAP = 30
LOOP_MAX_DISTANCE = 0.3
LOOP_MAX_ANGLE_DEG = 15.0
LOOP_BUCKET = 10
LOOP_MAX_PAIRS = 20


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor noise of the simulated rig."""

    pixel_sigma_px: float = 1.0
    depth_sigma: float = 0.0017       # multiplicative: d' = d + d * n
    gyro_noise: float = 1.7e-4        # rad/s/sqrt(Hz)
    accel_noise: float = 2e-3         # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5
    accel_walk: float = 1e-4
    gyro_bias_sigma: float = 1e-3     # initial bias draw
    accel_bias_sigma: float = 1e-2
    normal_sigma_deg: float = 3.0
    loop_rot_sigma_deg: float = 0.1
    loop_trans_sigma: float = 0.005

    @classmethod
    def zero(cls):
        return cls(**{f.name: 0.0 for f in fields(cls)})


@dataclass(frozen=True)
class WorldSpec:
    """
    Everything needed to regenerate a dataset bit for bit.

    ``trajectory`` is ``ellipse`` (closed loop through the default
    waypoints), ``waypoints`` (closed loop through ``waypoints``) or
    ``stationary``.
    """

    name: str = 'room'
    seed: int = 42
    room_size: tuple = (12.0, 8.0)
    floor_z: float = -1.3
    ceiling_z: float = 1.5
    horizontal_planes: int = 6
    vertical_planes: int = 10
    oblique_planes: int = 0
    planar_points: int = 2236
    nonplanar_points: int = 2032
    keyframes: int = 215
    trajectory: str = 'ellipse'
    waypoints: tuple = ()
    ellipse_axes: tuple = (3.5, 2.0)
    laps: float = 2.0
    height_wobble: float = 0.15
    roll_wobble_deg: float = 2.5
    pitch_wobble_deg: float = 2.0
    imu_rate: float = 200.0
    camera_rate: float = 30.0
    keyframe_stride: int = 10
    max_speed: float = 2.0
    max_accel: float = 4.0
    max_yaw_rate_deg: float = 120.0
    depth_range: tuple = (0.3, 8.0)
    loops: bool = True
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self):
        if self.imu_rate <= 0 or self.camera_rate <= 0 or self.keyframe_stride <= 0:
            raise WorldSpecError("rates and keyframe stride must be positive")
        for name in ('horizontal_planes', 'vertical_planes', 'oblique_planes',
                     'planar_points', 'nonplanar_points'):
            if getattr(self, name) < 0:
                raise WorldSpecError(f"{name} must be non-negative")
        if self.keyframes < 2:
            raise WorldSpecError("a dataset needs at least two keyframes")
        if self.trajectory not in ('ellipse', 'waypoints', 'stationary'):
            raise WorldSpecError(f"unknown trajectory kind {self.trajectory!r}")
        if self.trajectory == 'waypoints' and len(self.waypoints) < 3:
            raise WorldSpecError("a waypoint trajectory needs at least three waypoints")
        if self.laps <= 0:
            raise WorldSpecError("laps must be positive")
        if self.ceiling_z <= self.floor_z:
            raise WorldSpecError("ceiling must be above the floor")

    @property
    def imu_ticks_per_keyframe(self):
        return max(1, int(round(self.imu_rate * self.keyframe_stride / self.camera_rate)))

    @property
    def duration(self):
        return (self.keyframes - 1) * self.imu_ticks_per_keyframe / self.imu_rate

    @classmethod
    def preset(cls, name, **overrides):
        try:
            base = PRESETS[name]
        except KeyError:
            raise WorldSpecError(f"unknown world preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(base, **overrides)

    def scaled(self, keyframes):
        """Same scene and speed with ``keyframes`` keyframes and proportional landmark counts."""
        ratio = keyframes / self.keyframes
        return replace(
            self,
            keyframes=int(keyframes),
            planar_points=int(round(self.planar_points * ratio)),
            nonplanar_points=int(round(self.nonplanar_points * ratio)),
            laps=self.laps * ratio,
        )

    def to_document(self):
        doc = asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = [list(v) if isinstance(v, tuple) else v for v in value]
        return doc

    @classmethod
    def from_document(cls, document):
        """
        Build from a key-value document; ``preset`` selects the base spec.

        Raises:
            WorldSpecError: unknown keys or invalid values
        """
        document = dict(document or {})
        base = PRESETS.get(document.pop('preset', 'full'))
        if base is None:
            raise WorldSpecError("unknown world preset in document")
        known = {f.name for f in fields(cls)}
        unknown = set(document) - known
        if unknown:
            raise WorldSpecError(f"unknown world spec keys: {sorted(unknown)}")
        noise = document.pop('noise', None)
        if noise is not None:
            try:
                document['noise'] = replace(base.noise, **noise)
            except TypeError as exc:
                raise WorldSpecError(f"invalid noise block: {exc}")
        for key in ('room_size', 'ellipse_axes', 'depth_range'):
            if key in document:
                document[key] = tuple(float(v) for v in document[key])
        if 'waypoints' in document:
            document['waypoints'] = tuple(tuple(float(c) for c in w) for w in document['waypoints'])
        try:
            return replace(base, **document)
        except (TypeError, ValueError) as exc:
            raise WorldSpecError(str(exc))


PRESETS = {
    'full': WorldSpec(),
    'fast': WorldSpec(name='room-fast', laps=5.0, roll_wobble_deg=5.0, pitch_wobble_deg=4.0),
    'small': WorldSpec(name='room-small', keyframes=40, planar_points=480, nonplanar_points=240,
                       horizontal_planes=2, vertical_planes=4, laps=1.0),
}


def default_rig():
    return CameraRig(body_to_camera=Pose.from_rt(R_IMU_CAMERA, T_IMU_CAMERA))


# --- scene ---

def _patch(center, normal, axis_u, half_extents, kind):
    normal = np.asarray(normal, dtype=float)
    normal = normal / np.linalg.norm(normal)
    axis_u = np.asarray(axis_u, dtype=float)
    axis_u = axis_u - (axis_u @ normal) * normal
    axis_u = axis_u / np.linalg.norm(axis_u)
    center = np.asarray(center, dtype=float)
    return kind, center, normal, axis_u, tuple(float(h) for h in half_extents)


def plane_catalogue(spec):
    """Candidate patches in priority order, per kind."""
    hx, hy = spec.room_size[0] / 2.0, spec.room_size[1] / 2.0
    floor, ceiling = spec.floor_z, spec.ceiling_z
    mid, half_h = 0.5 * (floor + ceiling), 0.5 * (ceiling - floor)

    def cabinet(top):
        return 0.5 * (floor + top), 0.5 * (top - floor)

    horizontal = [
        _patch((0, 0, floor), (0, 0, 1), (1, 0, 0), (hx, hy), 'horizontal'),
        _patch((0, 0, ceiling), (0, 0, -1), (1, 0, 0), (hx, hy), 'horizontal'),
        _patch((hx - 0.35, 0, -0.2), (0, 0, 1), (1, 0, 0), (0.35, 1.2), 'horizontal'),
        _patch((-hx + 0.35, 0, 0.35), (0, 0, 1), (1, 0, 0), (0.35, 1.2), 'horizontal'),
        _patch((0, hy - 0.35, -0.5), (0, 0, 1), (1, 0, 0), (2.0, 0.35), 'horizontal'),
        _patch((0, -hy + 0.35, 0.6), (0, 0, 1), (1, 0, 0), (2.0, 0.35), 'horizontal'),
        _patch((hx - 0.2, 2.5, 1.0), (0, 0, -1), (1, 0, 0), (0.2, 1.0), 'horizontal'),
        _patch((-hx + 0.2, -2.5, -0.85), (0, 0, 1), (1, 0, 0), (0.2, 1.0), 'horizontal'),
    ]

    vertical = [
        _patch((hx, 0, mid), (-1, 0, 0), (0, 1, 0), (hy, half_h), 'vertical'),
        _patch((-hx, 0, mid), (1, 0, 0), (0, 1, 0), (hy, half_h), 'vertical'),
        _patch((0, hy, mid), (0, -1, 0), (1, 0, 0), (hx, half_h), 'vertical'),
        _patch((0, -hy, mid), (0, 1, 0), (1, 0, 0), (hx, half_h), 'vertical'),
    ]
    for center_xy, normal, axis_u, width, top in (
        ((hx - 0.7, 0), (-1, 0, 0), (0, 1, 0), 1.2, -0.2),
        ((-hx + 0.7, 0), (1, 0, 0), (0, 1, 0), 1.2, 0.35),
        ((0, hy - 0.7), (0, -1, 0), (1, 0, 0), 2.0, -0.5),
        ((0, -hy + 0.7), (0, 1, 0), (1, 0, 0), 2.0, 0.6),
    ):
        cz, hz = cabinet(top)
        vertical.append(_patch((*center_xy, cz), normal, axis_u, (width, hz), 'vertical'))
    cz, hz = cabinet(0.6)
    for sx, sy in ((1, 1), (-1, -1), (1, -1), (-1, 1)):
        c = np.array([sx * (hx - 1.1), sy * (hy - 1.0)])
        n = -c / np.linalg.norm(c)
        vertical.append(_patch((c[0], c[1], cz), (n[0], n[1], 0), (-n[1], n[0], 0), (0.8, hz), 'vertical'))

    oblique = [
        _patch((-3.2, hy - 0.5, floor + 0.6), (0, -0.6, 0.8), (1, 0, 0), (0.7, 0.6), 'oblique'),
        _patch((3.2, -hy + 0.5, floor + 0.6), (0, 0.6, 0.8), (1, 0, 0), (0.7, 0.6), 'oblique'),
    ]
    return {'horizontal': horizontal, 'vertical': vertical, 'oblique': oblique}


def build_planes(spec):
    """
    Select the first N patches of each kind.

    Raises:
        WorldSpecError: more planes requested than the room provides
    """
    catalogue = plane_catalogue(spec)
    selected = []
    for kind, count in (('horizontal', spec.horizontal_planes), ('vertical', spec.vertical_planes),
                        ('oblique', spec.oblique_planes)):
        available = catalogue[kind]
        if count > len(available):
            raise WorldSpecError(f"the room provides {len(available)} {kind} planes, {count} requested")
        selected.extend(available[:count])

    planes = []
    for plane_id, (kind, center, normal, axis_u, half) in enumerate(selected):
        plane = Plane(normal, -float(normal @ center))
        if abs(plane.distance) < MIN_PLANE_OFFSET:
            raise WorldSpecError(f"plane {plane_id} passes within {MIN_PLANE_OFFSET} m of the origin")
        planes.append(WorldPlane(plane_id, plane, kind, center, axis_u, half))
    return planes


# --- trajectory ---

class Trajectory:
    """Periodic C2 position spline with heading along the velocity plus roll/pitch wobble."""

    def __init__(self, spec):
        self.spec = spec
        self.stationary = spec.trajectory == 'stationary'
        self.lap_time = spec.duration / spec.laps
        if self.stationary:
            self.spline = None
            return
        if spec.trajectory == 'waypoints':
            points = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
        else:
            a, b = spec.ellipse_axes
            angles = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
            points = np.column_stack([a * np.cos(angles), b * np.sin(angles),
                                      spec.height_wobble * np.sin(2.0 * angles)])
        hx, hy = spec.room_size[0] / 2.0, spec.room_size[1] / 2.0
        if (np.any(np.abs(points[:, 0]) > hx - PATH_CLEARANCE) or np.any(np.abs(points[:, 1]) > hy - PATH_CLEARANCE)
                or np.any(points[:, 2] < spec.floor_z + PATH_CLEARANCE)
                or np.any(points[:, 2] > spec.ceiling_z - PATH_CLEARANCE)):
            raise InfeasibleTrajectory("waypoints leave the room's free space")
        knots = np.linspace(0.0, self.lap_time, len(points) + 1)
        self.spline = CubicSpline(knots, np.vstack([points, points[:1]]), bc_type='periodic')

    def _phase(self, t):
        return 2.0 * np.pi * np.asarray(t, dtype=float) / self.lap_time

    def position(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.stationary:
            return np.zeros((len(t), 3))
        return self.spline(np.mod(t, self.lap_time))

    def kinematics(self, t):
        """Position, velocity, acceleration, body rotation and body angular rate at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        n = len(t)
        if self.stationary:
            zeros = np.zeros((n, 3))
            return zeros, zeros, zeros, np.broadcast_to(np.eye(3), (n, 3, 3)).copy(), zeros

        tau = np.mod(t, self.lap_time)
        p = self.spline(tau)
        v = self.spline(tau, 1)
        a = self.spline(tau, 2)

        speed_xy2 = v[:, 0] ** 2 + v[:, 1] ** 2
        if np.any(speed_xy2 < 1e-8):
            raise InfeasibleTrajectory("horizontal speed vanishes; heading is undefined")
        yaw = np.arctan2(v[:, 1], v[:, 0])
        yaw_rate = (v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]) / speed_xy2

        w = 2.0 * np.pi / self.lap_time
        phase = self._phase(t)
        roll_amp = np.deg2rad(self.spec.roll_wobble_deg)
        pitch_amp = np.deg2rad(self.spec.pitch_wobble_deg)
        roll = roll_amp * np.sin(3.0 * phase)
        roll_rate = 3.0 * w * roll_amp * np.cos(3.0 * phase)
        pitch = pitch_amp * np.sin(5.0 * phase)
        pitch_rate = 5.0 * w * pitch_amp * np.cos(5.0 * phase)

        R = ScipyRotation.from_euler('ZYX', np.column_stack([yaw, pitch, roll])).as_matrix()
        omega = np.column_stack([
            roll_rate - yaw_rate * np.sin(pitch),
            pitch_rate * np.cos(roll) + yaw_rate * np.cos(pitch) * np.sin(roll),
            -pitch_rate * np.sin(roll) + yaw_rate * np.cos(pitch) * np.cos(roll),
        ])
        return p, v, a, R, omega

    def check_limits(self):
        """
        Raises:
            InfeasibleTrajectory: speed, acceleration or yaw rate above the WorldSpec limits
        """
        if self.stationary:
            return
        t = np.linspace(0.0, self.lap_time, 2000, endpoint=False)
        _, v, a, _, omega = self.kinematics(t)
        peak_speed = float(np.linalg.norm(v, axis=1).max())
        peak_accel = float(np.linalg.norm(a, axis=1).max())
        peak_rate = float(np.rad2deg(np.abs(omega).max()))
        if peak_speed > self.spec.max_speed:
            raise InfeasibleTrajectory(f"peak speed {peak_speed:.2f} m/s exceeds {self.spec.max_speed}")
        if peak_accel > self.spec.max_accel:
            raise InfeasibleTrajectory(f"peak acceleration {peak_accel:.2f} m/s^2 exceeds {self.spec.max_accel}")
        if peak_rate > self.spec.max_yaw_rate_deg:
            raise InfeasibleTrajectory(f"peak rotation rate {peak_rate:.1f} deg/s exceeds {self.spec.max_yaw_rate_deg}")


def _simulate_imu(spec, trajectory, rng):
    """
    Sample the IMU and integrate the clean samples into ground-truth states.

    Returns the noisy stream plus per-tick rotations, positions, velocities and true biases.
    """
    ticks = (spec.keyframes - 1) * spec.imu_ticks_per_keyframe
    dt = 1.0 / spec.imu_rate
    times = np.arange(ticks + 1) * dt
    mid = times + 0.5 * dt

    _, _, accel_world, _, omega = trajectory.kinematics(mid)
    p0, v0, _, R0, _ = trajectory.kinematics(times[:1])

    R = np.empty((ticks + 1, 3, 3))
    p = np.empty((ticks + 1, 3))
    v = np.empty((ticks + 1, 3))
    R[0], p[0], v[0] = R0[0], p0[0], v0[0]
    dR = so3_exp(omega * dt)
    specific = accel_world - GRAVITY
    accel = np.empty((ticks + 1, 3))
    for k in range(ticks + 1):
        accel[k] = R[k].T @ specific[k]
        if k == ticks:
            break
        p[k + 1] = p[k] + v[k] * dt + 0.5 * accel_world[k] * dt ** 2
        v[k + 1] = v[k] + accel_world[k] * dt
        R[k + 1] = R[k] @ dR[k]

    noise = spec.noise
    bg0 = rng.normal(0.0, noise.gyro_bias_sigma, 3) if noise.gyro_bias_sigma > 0 else np.zeros(3)
    ba0 = rng.normal(0.0, noise.accel_bias_sigma, 3) if noise.accel_bias_sigma > 0 else np.zeros(3)
    walk_g = rng.normal(0.0, noise.gyro_walk * np.sqrt(dt), (ticks + 1, 3))
    walk_a = rng.normal(0.0, noise.accel_walk * np.sqrt(dt), (ticks + 1, 3))
    walk_g[0] = 0.0
    walk_a[0] = 0.0
    bg = bg0 + np.cumsum(walk_g, axis=0)
    ba = ba0 + np.cumsum(walk_a, axis=0)
    gyro_meas = omega + bg + rng.normal(0.0, noise.gyro_noise / np.sqrt(dt), (ticks + 1, 3))
    accel_meas = accel + ba + rng.normal(0.0, noise.accel_noise / np.sqrt(dt), (ticks + 1, 3))

    return ImuStream(times, gyro_meas, accel_meas), R, p, v, bg, ba


# --- landmarks and observations ---

def _camera_frames(keyframes, rig):
    poses = [kf.camera_pose(rig) for kf in keyframes]
    return np.stack([T.R for T in poses]), np.stack([T.translation for T in poses])


def _visibility(points, R_wc, t_wc, rig, depth_range):
    """Boolean (K, N) mask plus clean normalised projections (K, N, 2) and depths (K, N)."""
    local = np.einsum('kji,knj->kni', R_wc, points[None, :, :] - t_wc[:, None, :])
    z = local[..., 2]
    safe = np.where(np.abs(z) > 1e-9, z, 1e-9)
    xy = local[..., :2] / safe[..., None]
    visible = (z >= depth_range[0]) & (z <= depth_range[1])
    inside = np.zeros_like(visible)
    for k in range(len(R_wc)):
        inside[k] = rig.in_image(xy[k])
    return visible & inside, xy, z


def _allocate(planes, total):
    if not planes or total == 0:
        return [0] * len(planes)
    floor = min(60, total // len(planes))
    counts = np.full(len(planes), floor)
    remaining = total - floor * len(planes)
    areas = np.array([p.area for p in planes])
    share = remaining * areas / areas.sum()
    extra = np.floor(share).astype(int)
    leftover = remaining - extra.sum()
    order = np.argsort(-(share - extra), kind='stable')
    extra[order[:leftover]] += 1
    return (counts + extra).tolist()


def _sample_planar(planes, total, rng, R_wc, t_wc, rig, depth_range):
    """Sample points on the patches, keeping only those seen by at least one keyframe."""
    positions, owners = [], []
    deficit = 0
    spare = []
    for plane, count in zip(planes, _allocate(planes, total)):
        pool = plane.sample(rng, max(8 * count, 200))
        seen = _visibility(pool, R_wc, t_wc, rig, depth_range)[0].any(axis=0)
        pool = pool[seen]
        take = min(count, len(pool))
        positions.append(pool[:take])
        owners.extend([plane.id] * take)
        spare.append((plane.id, pool[take:]))
        deficit += count - take
    for plane_id, pool in spare:
        if deficit == 0:
            break
        take = min(deficit, len(pool))
        positions.append(pool[:take])
        owners.extend([plane_id] * take)
        deficit -= take
    if deficit:
        raise WorldSpecError(f"{deficit} planar points could not be placed in view of the trajectory")
    return np.vstack(positions) if positions else np.zeros((0, 3)), np.array(owners, dtype=np.int64)


def _sample_free(spec, planes, total, rng, path, R_wc, t_wc, rig):
    hx, hy = spec.room_size[0] / 2.0, spec.room_size[1] / 2.0
    low = np.array([-hx + 0.2, -hy + 0.2, spec.floor_z + 0.1])
    high = np.array([hx - 0.2, hy - 0.2, spec.ceiling_z - 0.1])
    tree = cKDTree(path)
    kept = []
    count = 0
    for _ in range(50):
        if count >= total:
            break
        pool = rng.uniform(low, high, size=(max(4 * (total - count), 200), 3))
        ok = tree.query(pool)[0] > PATH_CLEARANCE
        for plane in planes:
            near = np.abs(plane.plane.signed_distance(pool)) < PLANE_CLEARANCE
            ok &= ~(near & plane.contains(pool, margin=PLANE_CLEARANCE_PAD))
        pool = pool[ok]
        if len(pool):
            pool = pool[_visibility(pool, R_wc, t_wc, rig, spec.depth_range)[0].any(axis=0)]
        pool = pool[:total - count]
        kept.append(pool)
        count += len(pool)
    if count < total:
        raise WorldSpecError(f"only {count} of {total} non-planar points fit the free space")
    return np.vstack(kept) if kept else np.zeros((0, 3))


def _noisy_normals(normals, sigma_deg, rng):
    normals = np.asarray(normals, dtype=float)
    if len(normals) == 0:
        return normals
    if sigma_deg > 0:
        axes = rng.normal(size=normals.shape)
        axes -= np.einsum('ni,ni->n', axes, normals)[:, None] * normals
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        angles = rng.normal(0.0, np.deg2rad(sigma_deg), len(normals))
        normals = ScipyRotation.from_rotvec(axes * angles[:, None]).apply(normals)
    signs = rng.choice([-1.0, 1.0], size=len(normals))
    return normals * signs[:, None]


def _observe(points, R_wc, t_wc, rig, spec, keyframe_ids, landmark_ids, rng):
    visible, xy, z = _visibility(points, R_wc, t_wc, rig, spec.depth_range)
    run = np.zeros(len(points), dtype=np.int64)
    keep = np.zeros_like(visible)
    for k in range(len(R_wc)):
        run = np.where(visible[k], run + 1, 0)
        keep[k] = visible[k] & (run <= MAX_TRACK)
    kk, ll = np.nonzero(keep)
    obs_xy = xy[kk, ll]
    depth = z[kk, ll]
    sigma = rig.pixels_to_normalized(spec.noise.pixel_sigma_px)
    if sigma > 0:
        obs_xy = obs_xy + rng.normal(0.0, sigma, obs_xy.shape)
    if spec.noise.depth_sigma > 0:
        depth = depth * (1.0 + rng.normal(0.0, spec.noise.depth_sigma, len(depth)))
    return ObservationTable(keyframe_ids[kk], landmark_ids[ll], obs_xy, depth)


def _declare_loops(keyframes, rig, noise, rng):
    poses = [kf.camera_pose(rig) for kf in keyframes]
    positions = np.stack([T.translation for T in poses])
    tree = cKDTree(positions)
    best = {}
    for n in range(len(keyframes)):
        for m in tree.query_ball_point(positions[n], LOOP_MAX_DISTANCE):
            if n - m < LOOP_MIN_GAP:
                continue
            angle = np.rad2deg(poses[m].rotation.angle_to(poses[n].rotation))
            if angle >= LOOP_MAX_ANGLE_DEG:
                continue
            distance = float(np.linalg.norm(positions[n] - positions[m]))
            bucket = n // LOOP_BUCKET
            if bucket not in best or distance < best[bucket][0]:
                best[bucket] = (distance, m, n)
    pairs = []
    for bucket in sorted(best)[:LOOP_MAX_PAIRS]:
        _, m, n = best[bucket]
        measured = poses[m].inverse().compose(poses[n])
        if noise.loop_rot_sigma_deg > 0 or noise.loop_trans_sigma > 0:
            delta_rot = rng.normal(0.0, np.deg2rad(noise.loop_rot_sigma_deg), 3)
            delta_t = rng.normal(0.0, noise.loop_trans_sigma, 3)
            measured = Pose(Rotation.from_rotvec(delta_rot).compose(measured.rotation),
                            measured.translation + delta_t)
        pairs.append(LoopPair(keyframes[m].id, keyframes[n].id, measured))
    return pairs


def generate(spec):
    """
    Generate a dataset from ``spec``.

    Raises:
        InfeasibleTrajectory: trajectory violates its speed/acceleration bounds
        WorldSpecError: scene cannot hold the requested planes or points
    """
    rng = np.random.default_rng(spec.seed)
    rig = default_rig()
    trajectory = Trajectory(spec)
    trajectory.check_limits()

    imu, R, p, v, bg, ba = _simulate_imu(spec, trajectory, rng)
    stride = spec.imu_ticks_per_keyframe
    keyframes = []
    for k in range(spec.keyframes):
        tick = k * stride
        keyframes.append(KeyframeState(
            id=k,
            timestamp=float(imu.timestamps[tick]),
            pose=Pose.from_rt(R[tick], p[tick]),
            velocity=v[tick].copy(),
            gyro_bias=bg[tick].copy(),
            accel_bias=ba[tick].copy(),
            imu_index=tick,
        ))

    planes = build_planes(spec)
    R_wc, t_wc = _camera_frames(keyframes, rig)
    planar, owners = _sample_planar(planes, spec.planar_points, rng, R_wc, t_wc, rig, spec.depth_range)
    free = _sample_free(spec, planes, spec.nonplanar_points, rng, p, R_wc, t_wc, rig)

    plane_normals = np.stack([planes[o].plane.normal for o in owners]) if len(owners) else np.zeros((0, 3))
    planar_normals = _noisy_normals(plane_normals, spec.noise.normal_sigma_deg, rng)
    free_normals = rng.normal(size=(len(free), 3))
    if len(free):
        free_normals /= np.linalg.norm(free_normals, axis=1, keepdims=True)

    positions = np.vstack([planar, free])
    landmarks = [
        Landmark(i, positions[i].copy(), planar_normals[i].copy(), int(owners[i]))
        for i in range(len(planar))
    ] + [
        Landmark(len(planar) + i, free[i].copy(), free_normals[i].copy(), None)
        for i in range(len(free))
    ]

    keyframe_ids = np.array([kf.id for kf in keyframes], dtype=np.int64)
    landmark_ids = np.array([lm.id for lm in landmarks], dtype=np.int64)
    observations = _observe(positions, R_wc, t_wc, rig, spec, keyframe_ids, landmark_ids, rng)
    loops = _declare_loops(keyframes, rig, spec.noise, rng) if spec.loops else []

    dataset = Dataset(
        name=f"{spec.name}-{spec.seed}",
        spec=spec,
        rig=rig,
        gravity=GRAVITY.copy(),
        keyframes=keyframes,
        planes=planes,
        landmarks=landmarks,
        observations=observations,
        imu=imu,
        loops=loops,
    )
    log.info("dataset_generated", dataset=dataset.name, keyframes=len(keyframes),
             planar=len(planar), nonplanar=len(free), planes=len(planes),
             observations=len(observations), loops=len(loops))
    return dataset


# --- evaluation helpers ---

def perturb(states, sigma_rot_deg, sigma_trans, seed=0, sigma_velocity=None, sigma_bias=0.0):
    """
    Emulate odometric drift: random-walk pose errors accumulated from the
    first keyframe on, plus independent velocity and bias noise.

    Returns a perturbed copy of ``states``; the first keyframe is untouched.
    """
    if sigma_rot_deg < 0 or sigma_trans < 0:
        raise ValueError("perturbation sigmas must be non-negative")
    sigma_velocity = sigma_trans if sigma_velocity is None else sigma_velocity
    rng = np.random.default_rng(seed)
    out = states.copy()
    K = out.num_keyframes
    if K == 0:
        return out
    order = np.argsort(out.keyframe_ids)
    steps_rot = rng.normal(0.0, np.deg2rad(sigma_rot_deg), (K, 3))
    steps_t = rng.normal(0.0, sigma_trans, (K, 3))
    steps_v = rng.normal(0.0, sigma_velocity, (K, 3))
    steps_bg = rng.normal(0.0, sigma_bias, (K, 3))
    steps_ba = rng.normal(0.0, sigma_bias, (K, 3))
    steps_rot[0] = 0.0
    steps_t[0] = 0.0

    R = out.rotation_matrices()
    origin = out.translations[order[0]].copy()
    drift_R = np.eye(3)
    drift_t = np.zeros(3)
    for step, row in enumerate(order):
        drift_R = so3_exp(steps_rot[step]) @ drift_R
        drift_t = drift_t + steps_t[step]
        if step == 0:
            continue
        pose = Pose.from_rt(drift_R @ R[row], drift_R @ (out.translations[row] - origin) + origin + drift_t)
        out.set_pose(int(out.keyframe_ids[row]), pose)
        out.velocities[row] = drift_R @ out.velocities[row] + steps_v[step]
        out.gyro_biases[row] += steps_bg[step]
        out.accel_biases[row] += steps_ba[step]
    return out


def _as_positions(trajectory):
    if isinstance(trajectory, dict):
        return trajectory
    return {i: p for i, p in enumerate(np.asarray(trajectory, dtype=float).reshape(-1, 3))}


def align_trajectory(estimated, ground_truth):
    """
    Rigid (rotation + translation, no scale) least-squares alignment of
    estimated positions onto ground truth.

    Returns ``(R, t)`` with ``ground_truth ~ estimated @ R.T + t``.
    """
    est = np.asarray(estimated, dtype=float).reshape(-1, 3)
    gt = np.asarray(ground_truth, dtype=float).reshape(-1, 3)
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    W = (gt - mu_g).T @ (est - mu_e)
    U, _, Vt = np.linalg.svd(W)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_g - R @ mu_e


def ate_rmse(estimated, ground_truth):
    """
    Absolute trajectory error after rigid alignment, in metres.

    Both arguments are (N, 3) position arrays or dicts of id -> position.

    Raises:
        LengthMismatch: different lengths or ids
    """
    est = _as_positions(estimated)
    gt = _as_positions(ground_truth)
    if len(est) != len(gt) or set(est) != set(gt):
        raise LengthMismatch(f"trajectories differ: {len(est)} estimated vs {len(gt)} ground-truth poses")
    if not est:
        raise LengthMismatch("trajectories are empty")
    ids = sorted(gt)
    E = np.stack([np.asarray(est[i], dtype=float) for i in ids])
    G = np.stack([np.asarray(gt[i], dtype=float) for i in ids])
    R, t = align_trajectory(E, G)
    residual = G - (E @ R.T + t)
    return float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
