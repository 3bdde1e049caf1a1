"""
Pytest configuration and shared fixtures for the test suite.
Provides settings, simulated datasets, random state vectors and a
finite-difference Jacobian helper.
"""
import numpy as np
import pytest

from src.bench import build_initial_map, build_planes
from src.config import load_settings
from src.factors import (
    SLOT_DIMS,
    CompressedHomographyBatch,
    CompressedPointToPlaneBatch,
    HomographyPointBatch,
    ImuBatch,
    PointToPlaneBatch,
    PosePlaneBatch,
    PosePlaneFactor,
    RelativePoseBatch,
    RelativePoseFactor,
    ReprojDepthBatch,
)
from src.geometry import Plane, Pose, Rotation
from src.preintegration import ImuNoise, preintegrate
from src.simworld import NoiseSpec, WorldSpec, default_rig, generate
from src.state import StateVector


@pytest.fixture
def settings():
    """Testing settings: 50 LM iterations, no time cap, labelled planes."""
    return load_settings('testing')


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope='session')
def clean_world():
    """
    Zero-noise 'small' dataset shared by the whole session.
    Tests must not mutate it; build a map from it instead.
    """
    return generate(WorldSpec.preset('small', noise=NoiseSpec.zero()))


@pytest.fixture(scope='session')
def noisy_world():
    """'small' dataset with the default sensor noise."""
    return generate(WorldSpec.preset('small'))


@pytest.fixture
def clean_map(clean_world):
    """
    Map at ground truth with planes built from the dataset labels.

    Returns:
        SlamMap
    """
    exact = load_settings('testing', {'perturb_rot_deg': 0.0, 'perturb_trans': 0.0})
    slam_map = build_initial_map(clean_world, exact)
    build_planes(slam_map, clean_world, exact)
    return slam_map


def random_states(rng, keyframes=3, landmarks=0, planes=0, lever_arm=True):
    """
    Random but well-conditioned states: cameras look roughly the same way,
    landmarks sit 3-6 m in front of keyframe 0 and planes stay at least
    1.5 m from every camera centre.
    """
    rig = default_rig()
    body_to_camera = rig.body_to_camera if lever_arm else Pose.identity()
    quaternions = [Rotation.from_rotvec(rng.normal(size=3) * 0.15).quaternion for _ in range(keyframes)]
    states = StateVector(
        keyframe_ids=np.arange(keyframes),
        quaternions=quaternions,
        translations=rng.uniform(-0.3, 0.3, size=(keyframes, 3)),
        velocities=rng.normal(size=(keyframes, 3)),
        gyro_biases=rng.normal(scale=0.01, size=(keyframes, 3)),
        accel_biases=rng.normal(scale=0.05, size=(keyframes, 3)),
        body_to_camera=body_to_camera,
    )
    positions = np.zeros((0, 3))
    if landmarks:
        camera = states.camera_pose(0)
        local = np.column_stack([
            rng.uniform(-0.6, 0.6, landmarks),
            rng.uniform(-0.6, 0.6, landmarks),
            rng.uniform(3.0, 6.0, landmarks),
        ])
        positions = camera.act(local)
    etas = []
    for _ in range(planes):
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        etas.append(Plane(normal, rng.uniform(2.0, 5.0)).to_cp().eta)
    return StateVector(
        keyframe_ids=states.keyframe_ids,
        quaternions=states.quaternions,
        translations=states.translations,
        velocities=states.velocities,
        gyro_biases=states.gyro_biases,
        accel_biases=states.accel_biases,
        landmark_ids=np.arange(landmarks),
        landmarks=positions,
        plane_ids=np.arange(planes),
        planes=np.array(etas).reshape(-1, 3),
        body_to_camera=states.body_to_camera,
    )


def _retract(states, kind, entity_id, delta):
    if kind == 'pose':
        states.retract_poses([states.keyframe_index(entity_id)], delta[None])
    elif kind == 'motion':
        states.retract_motion([states.keyframe_index(entity_id)], delta[None])
    elif kind == 'landmark':
        states.retract_landmarks([states.landmark_index(entity_id)], delta[None])
    else:
        states.retract_planes([states.plane_index(entity_id)], delta[None])


def finite_difference_jacobians(batch, states, eps=1e-6):
    """
    Central differences of every factor's residual through the same
    retractions the solver uses; one (B, m, dim) array per batch slot.
    """
    r0, _ = batch.evaluate(states, jacobians=False)
    B, m = r0.shape
    result = []
    for slot in batch.slots():
        dim = SLOT_DIMS[slot.kind]
        J = np.zeros((B, m, dim))
        for b in range(B):
            for c in range(dim):
                delta = np.zeros(dim)
                delta[c] = eps
                plus, minus = states.copy(), states.copy()
                _retract(plus, slot.kind, slot.ids[b], delta)
                _retract(minus, slot.kind, slot.ids[b], -delta)
                r_plus, _ = batch.evaluate(plus, jacobians=False)
                r_minus, _ = batch.evaluate(minus, jacobians=False)
                J[b, :, c] = (r_plus[b] - r_minus[b]) / (2.0 * eps)
        result.append(J)
    return result


def assert_jacobians_match(batch, states, rtol=1e-4):
    """Compare every analytic Jacobian slot of ``batch`` against central differences."""
    _, analytic = batch.evaluate(states)
    numeric = finite_difference_jacobians(batch, states)
    for slot, A, N in zip(batch.slots(), analytic, numeric):
        scale = max(1.0, float(np.abs(N).max()))
        np.testing.assert_allclose(
            A, N, rtol=rtol, atol=rtol * 1e-2 * scale,
            err_msg=f"{batch.name}: {slot.kind} Jacobian differs from finite differences",
        )


def random_batches(rng, states):
    """
    One batch of every factor type over ``random_states(rng, 3, landmarks>=4, planes>=2)``.

    Returns:
        dict batch name -> FactorBatch
    """
    kf = states.keyframe_ids
    pairs = [(0, 1), (0, 2), (1, 2)]

    obs_k = np.repeat(kf, states.num_landmarks)
    obs_l = np.tile(states.landmark_ids, states.num_keyframes)
    points = rng.uniform(-0.2, 0.2, size=(len(obs_k), 2))
    depths = rng.uniform(3.0, 6.0, size=len(obs_k))

    imu = []
    for i, j in zip(kf[:-1], kf[1:]):
        n = 12
        samples = (rng.normal(scale=0.3, size=(n, 3)), rng.normal(scale=1.0, size=(n, 3)) + [0.0, 0.0, 9.81],
                   np.full(n, 0.005))
        imu.append(preintegrate(samples, rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3),
                                ImuNoise(), frame_i=i, frame_j=j))

    frame_i = np.array([p[0] for p in pairs for _ in range(4)])
    frame_j = np.array([p[1] for p in pairs for _ in range(4)])
    plane_ids = np.array([p % 2 for p in range(len(pairs)) for _ in range(4)])
    points_i = rng.uniform(-0.3, 0.3, size=(len(frame_i), 2))
    points_j = points_i + rng.normal(scale=0.02, size=points_i.shape)
    group = np.repeat(np.arange(len(pairs)), 4)

    local = rng.uniform(-1.0, 1.0, size=(8, 3)) + [0.0, 0.0, 4.0]
    local_kf = np.array([0, 0, 0, 0, 1, 1, 2, 2])
    local_plane = np.array([0, 0, 1, 1, 0, 0, 1, 1])
    local_group = np.array([0, 0, 1, 1, 2, 2, 3, 3])

    relative = []
    for i, j in pairs:
        truth = states.camera_pose(i).inverse().compose(states.camera_pose(j))
        noisy = Pose(Rotation.from_rotvec(rng.normal(scale=0.05, size=3)).compose(truth.rotation),
                     truth.translation + rng.normal(scale=0.05, size=3))
        relative.append(RelativePoseFactor(i, j, noisy, np.diag(rng.uniform(1.0, 3.0, 6))))
    pose_plane = []
    for k in kf:
        normal = rng.normal(size=3)
        measured = Plane(normal / np.linalg.norm(normal), rng.uniform(1.0, 3.0))
        pose_plane.append(PosePlaneFactor(int(k), int(k) % 2, measured, np.eye(3) * 2.0))

    return {
        'reproj_depth': ReprojDepthBatch(obs_k, obs_l, points, depths, sigma_px=1.0 / 460.0, sigma_depth=0.01),
        'imu': ImuBatch(imu),
        'homography_point': HomographyPointBatch(frame_i, frame_j, plane_ids, points_i, points_j, sigma=0.01),
        'compressed_homography': CompressedHomographyBatch.from_points(
            np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]), np.array([0, 1, 0]),
            group, points_i, points_j, sigma=0.01),
        'point_to_plane': PointToPlaneBatch(local_kf, local_plane, local, sigma=0.02),
        'compressed_point_to_plane': CompressedPointToPlaneBatch.from_points(
            np.array([0, 0, 1, 2]), np.array([0, 1, 0, 1]), local_group, local, sigma=0.02),
        'relative_pose': RelativePoseBatch(relative),
        'pose_plane': PosePlaneBatch(pose_plane),
    }


@pytest.fixture
def make_states():
    """Factory fixture around ``random_states``."""
    return random_states


@pytest.fixture
def make_batches():
    """Factory fixture around ``random_batches``."""
    return random_batches


@pytest.fixture
def check_jacobians():
    """Factory fixture around ``assert_jacobians_match``."""
    return assert_jacobians_match
