"""
Tests for the synthetic world generator, drift perturbation and trajectory error.
"""
import numpy as np
import pytest

from src.assembly import assemble_gba
from src.errors import InfeasibleTrajectory, LengthMismatch, WorldSpecError
from src.geometry import Rotation
from src.simworld import NoiseSpec, WorldSpec, align_trajectory, ate_rmse, generate, perturb
from src.state import StateVector
from src.storage import dataset_digest


def resting_states(count):
    return StateVector(
        keyframe_ids=np.arange(count),
        quaternions=np.tile([1.0, 0.0, 0.0, 0.0], (count, 1)),
        translations=np.zeros((count, 3)),
        velocities=np.zeros((count, 3)),
        gyro_biases=np.zeros((count, 3)),
        accel_biases=np.zeros((count, 3)),
    )


@pytest.mark.unit
class TestWorldSpec:
    """Test world specification presets and documents."""

    def test_unknown_preset_raises(self):
        """Test that an unknown preset name raises WorldSpecError."""
        with pytest.raises(WorldSpecError):
            WorldSpec.preset('warehouse')

    def test_single_keyframe_is_rejected(self):
        """Test that a world needs at least two keyframes."""
        with pytest.raises(WorldSpecError):
            WorldSpec(keyframes=1)

    def test_negative_counts_are_rejected(self):
        """Test that negative plane or point counts are rejected."""
        with pytest.raises(WorldSpecError):
            WorldSpec(planar_points=-1)

    def test_document_round_trip(self):
        """Test that a spec survives conversion to a document and back."""
        spec = WorldSpec.preset('small', seed=7, noise=NoiseSpec(pixel_sigma_px=0.5))

        assert WorldSpec.from_document(spec.to_document()) == spec

    def test_document_unknown_key_raises(self):
        """Test that a document with unknown keys is rejected."""
        with pytest.raises(WorldSpecError):
            WorldSpec.from_document({'preset': 'small', 'colour': 'blue'})

    def test_document_overrides_preset(self):
        """Test that document keys override the chosen preset."""
        spec = WorldSpec.from_document({'preset': 'small', 'keyframes': 12, 'noise': {'depth_sigma': 0.0}})

        assert spec.keyframes == 12
        assert spec.noise.depth_sigma == 0.0
        assert spec.noise.pixel_sigma_px == NoiseSpec().pixel_sigma_px

    def test_scaled_keeps_density(self):
        """Test that scaling the keyframe count scales landmarks and laps proportionally."""
        spec = WorldSpec.preset('full').scaled(100)

        assert spec.keyframes == 100
        assert spec.planar_points == round(2236 * 100 / 215)
        assert spec.laps == pytest.approx(2.0 * 100 / 215)


@pytest.mark.integration
class TestGenerate:
    """Test dataset generation."""

    def test_same_seed_same_bytes(self, noisy_world):
        """Test that regenerating from the same spec gives an identical dataset digest."""
        again = generate(WorldSpec.preset('small'))

        assert dataset_digest(again) == dataset_digest(noisy_world)

    def test_different_seed_differs(self, noisy_world):
        """Test that another seed gives another dataset."""
        assert dataset_digest(generate(WorldSpec.preset('small', seed=43))) != dataset_digest(noisy_world)

    def test_counts_follow_spec(self, clean_world):
        """Test that the dataset holds the requested keyframes, planes and points."""
        spec = clean_world.spec

        assert len(clean_world.keyframes) == spec.keyframes
        assert len(clean_world.planes) == spec.horizontal_planes + spec.vertical_planes
        assert clean_world.planar_count == spec.planar_points
        assert clean_world.nonplanar_count == spec.nonplanar_points

    def test_planar_landmarks_lie_on_their_planes(self, clean_world):
        """Test that every labelled landmark lies exactly on its ground-truth plane."""
        planes = {plane.id: plane.plane for plane in clean_world.planes}

        for lm in clean_world.landmarks:
            if lm.plane_id is not None:
                assert abs(planes[lm.plane_id].signed_distance(lm.position)) < 1e-12

    def test_observations_resolve_and_are_visible(self, clean_world):
        """Test that observations reference known ids and lie in the image within the depth range."""
        observations = clean_world.observations
        near, far = clean_world.spec.depth_range

        assert set(observations.keyframe_ids.tolist()) <= {kf.id for kf in clean_world.keyframes}
        assert set(observations.landmark_ids.tolist()) <= {lm.id for lm in clean_world.landmarks}
        assert np.all(clean_world.rig.in_image(observations.points, margin=0.0))
        assert np.all((observations.depths >= near) & (observations.depths <= far))

    def test_imu_timestamps_increase(self, clean_world):
        """Test that the IMU stream is strictly increasing in time and long enough for every keyframe."""
        assert np.all(np.diff(clean_world.imu.timestamps) > 0)
        assert clean_world.keyframes[-1].imu_index < len(clean_world.imu)

    @pytest.mark.parametrize('variant', ['VI_P', 'VI_CP'])
    def test_zero_noise_residuals_vanish(self, clean_map, settings, variant):
        """Test that every factor of a noise-free map evaluates to zero at ground truth."""
        problem = assemble_gba(clean_map, settings, variant).prepare()

        for batch in problem.batches:
            residual, _ = batch.evaluate(problem.states, jacobians=False)
            assert np.abs(residual).max() < 1e-6, f"{batch.name}: {np.abs(residual).max():.3e}"

    def test_stationary_accelerometer_reads_gravity(self):
        """Test that a resting IMU measures minus gravity in the body frame on average."""
        noise = NoiseSpec(gyro_bias_sigma=0.0, accel_bias_sigma=0.0, gyro_walk=0.0, accel_walk=0.0)
        spec = WorldSpec.preset('small', trajectory='stationary', keyframes=10, planar_points=0,
                                nonplanar_points=0, loops=False, noise=noise)

        dataset = generate(spec)

        np.testing.assert_allclose(dataset.imu.accel.mean(axis=0), [0.0, 0.0, 9.81], atol=0.01)
        np.testing.assert_allclose(dataset.imu.gyro.mean(axis=0), np.zeros(3), atol=0.002)

    def test_speed_limit_is_enforced(self):
        """Test that a trajectory faster than the allowed peak speed is infeasible."""
        with pytest.raises(InfeasibleTrajectory):
            generate(WorldSpec.preset('small', max_speed=0.1))

    def test_room_too_small_is_infeasible(self):
        """Test that waypoints outside the room's free space are infeasible."""
        with pytest.raises(InfeasibleTrajectory):
            generate(WorldSpec.preset('small', room_size=(4.0, 3.0)))


@pytest.mark.unit
class TestPerturb:
    """Test the random-walk drift applied to initial states."""

    def test_zero_sigma_is_identity(self, make_states, rng):
        """Test that zero noise leaves the states unchanged."""
        states = make_states(rng, keyframes=5)

        out = perturb(states, 0.0, 0.0)

        np.testing.assert_allclose(out.translations, states.translations, atol=1e-12)
        for k in states.keyframe_ids:
            assert out.pose(k).rotation.angle_to(states.pose(k).rotation) < 1e-12
        np.testing.assert_allclose(out.velocities, states.velocities, atol=1e-15)

    def test_same_seed_reproduces(self, make_states, rng):
        """Test that a fixed seed gives identical perturbations."""
        states = make_states(rng, keyframes=5)

        a = perturb(states, 1.0, 0.05, seed=3)
        b = perturb(states, 1.0, 0.05, seed=3)

        np.testing.assert_array_equal(a.quaternions, b.quaternions)
        np.testing.assert_array_equal(a.translations, b.translations)

    def test_first_keyframe_is_untouched(self, make_states, rng):
        """Test that drift starts after the first keyframe."""
        states = make_states(rng, keyframes=4)

        out = perturb(states, 2.0, 0.1, seed=1)

        np.testing.assert_array_equal(out.translations[0], states.translations[0])
        np.testing.assert_array_equal(out.quaternions[0], states.quaternions[0])

    def test_negative_sigma_raises(self, make_states, rng):
        """Test that negative noise levels are rejected."""
        with pytest.raises(ValueError):
            perturb(make_states(rng, keyframes=2), -1.0, 0.0)

    @pytest.mark.slow
    def test_endpoint_offset_grows_as_random_walk(self):
        """Test that 200 keyframes of 5 cm steps give a mean squared endpoint offset of 3 * 199 * 0.05^2."""
        states = resting_states(200)
        step_variance = 199 * 0.05 ** 2

        squared = [np.sum(perturb(states, 0.0, 0.05, seed=seed).translations[-1] ** 2) for seed in range(100)]

        expected = 3.0 * step_variance
        spread = np.sqrt(6.0) * step_variance / np.sqrt(100)
        assert abs(np.mean(squared) - expected) <= 3.0 * spread


@pytest.mark.unit
class TestAteRmse:
    """Test the absolute trajectory error."""

    def test_identical_trajectories(self, rng):
        """Test that a trajectory has zero error against itself."""
        positions = rng.normal(size=(20, 3))

        assert ate_rmse(positions, positions) == pytest.approx(0.0, abs=1e-12)

    def test_rigid_transform_is_absorbed(self, rng):
        """Test that alignment removes a rigid motion of the whole trajectory."""
        positions = rng.normal(size=(20, 3))
        R = Rotation.from_rotvec([0.3, -0.5, 1.1]).matrix()

        moved = positions @ R.T + [4.0, -2.0, 0.5]

        assert ate_rmse(moved, positions) < 1e-9

    def test_length_mismatch_raises(self, rng):
        """Test that trajectories of different lengths raise LengthMismatch."""
        with pytest.raises(LengthMismatch):
            ate_rmse(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))

    def test_id_mismatch_raises(self):
        """Test that dict trajectories with different ids raise LengthMismatch."""
        with pytest.raises(LengthMismatch):
            ate_rmse({0: np.zeros(3), 1: np.ones(3)}, {0: np.zeros(3), 2: np.ones(3)})

    def test_gaussian_offsets(self, rng):
        """Test that 1 cm isotropic offsets give an error close to 0.01 * sqrt(3)."""
        truth = rng.uniform(-5.0, 5.0, size=(500, 3))
        estimate = truth + rng.normal(scale=0.01, size=truth.shape)

        assert ate_rmse(estimate, truth) == pytest.approx(0.01 * np.sqrt(3.0), rel=0.1)

    def test_alignment_is_a_minimum(self, rng):
        """Test that no nearby rigid motion aligns the trajectories better than the closed form."""
        truth = rng.uniform(-5.0, 5.0, size=(50, 3))
        estimate = truth @ Rotation.from_rotvec([0.0, 0.0, 0.2]).matrix().T + rng.normal(scale=0.05, size=truth.shape)
        R, t = align_trajectory(estimate, truth)

        def objective(R_, t_):
            return np.mean(np.sum((truth - (estimate @ R_.T + t_)) ** 2, axis=1))

        best = objective(R, t)
        for _ in range(200):
            dR = Rotation.from_rotvec(rng.normal(scale=1e-3, size=3)).matrix()
            assert objective(dR @ R, t + rng.normal(scale=1e-3, size=3)) >= best
        assert np.sqrt(best) == pytest.approx(ate_rmse(estimate, truth))
