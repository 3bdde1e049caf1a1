"""
Tests for IMU preintegration and the preintegrated IMU residual.
"""
import numpy as np
import pytest

from src.errors import EmptyWindow
from src.geometry import Rotation
from src.preintegration import ImuNoise, eval_imu, preintegrate
from src.state import StateVector

GRAVITY = np.array([0.0, 0.0, -9.81])


def constant_samples(gyro, accel, duration=1.0, rate=200):
    n = int(round(duration * rate))
    return (np.tile(gyro, (n, 1)).astype(float), np.tile(accel, (n, 1)).astype(float), np.full(n, 1.0 / rate))


def two_keyframe_states(R_i, p_i, v_i, R_j, p_j, v_j, bg=(0.0, 0.0, 0.0), ba=(0.0, 0.0, 0.0)):
    return StateVector(
        keyframe_ids=[0, 1],
        quaternions=[Rotation.from_matrix(R_i).quaternion, Rotation.from_matrix(R_j).quaternion],
        translations=[p_i, p_j],
        velocities=[v_i, v_j],
        gyro_biases=[bg, bg],
        accel_biases=[ba, ba],
    )


@pytest.mark.unit
class TestPreintegrate:
    """Test accumulation of IMU samples into relative deltas."""

    def test_stationary_window(self):
        """
        Test that a stationary IMU predicts no relative motion.

        The raw velocity delta integrates specific force, so it equals -g * dt;
        the zero holds for the velocity change once gravity is added back.
        """
        factor = preintegrate(constant_samples([0.0, 0.0, 0.0], -GRAVITY), gravity=GRAVITY)

        R_j, p_j, v_j = factor.predict(np.eye(3), np.zeros(3), np.zeros(3))

        np.testing.assert_allclose(factor.delta_rotation.matrix(), np.eye(3), atol=1e-15)
        np.testing.assert_allclose(factor.delta_velocity, -GRAVITY * factor.duration, atol=1e-9)
        np.testing.assert_allclose(v_j, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(p_j, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(R_j, np.eye(3), atol=1e-15)
        assert factor.duration == pytest.approx(1.0)

    def test_stationary_states_have_zero_residual(self):
        """Test that two identical resting states fit a stationary window exactly."""
        factor = preintegrate(constant_samples([0.0, 0.0, 0.0], -GRAVITY), gravity=GRAVITY)
        states = two_keyframe_states(np.eye(3), np.zeros(3), np.zeros(3), np.eye(3), np.zeros(3), np.zeros(3))

        result = eval_imu(factor, states)

        np.testing.assert_allclose(result.residual, np.zeros(15), atol=1e-12)

    def test_constant_acceleration_from_rest(self):
        """Test that 1 m/s^2 along x for one second gives 0.5 m and 1 m/s."""
        factor = preintegrate(constant_samples([0.0, 0.0, 0.0], [1.0, 0.0, 0.0]), gravity=(0.0, 0.0, 0.0))

        np.testing.assert_allclose(factor.delta_position, [0.5, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(factor.delta_velocity, [1.0, 0.0, 0.0], atol=1e-12)

    def test_constant_rotation_rate(self):
        """Test that a constant yaw rate integrates to the matching rotation."""
        factor = preintegrate(constant_samples([0.0, 0.0, 0.5], -GRAVITY, duration=2.0), gravity=GRAVITY)

        np.testing.assert_allclose(factor.delta_rotation.log(), [0.0, 0.0, 1.0], atol=1e-12)

    def test_accepts_list_of_tuples(self):
        """Test that samples given as (gyro, accel, dt) tuples match the array form."""
        gyro, accel, dt = constant_samples([0.1, -0.2, 0.3], [0.5, 0.0, 9.81], duration=0.1)

        from_arrays = preintegrate((gyro, accel, dt))
        from_tuples = preintegrate(list(zip(gyro, accel, dt)))

        np.testing.assert_allclose(from_tuples.delta_position, from_arrays.delta_position)
        np.testing.assert_allclose(from_tuples.covariance, from_arrays.covariance)

    def test_empty_window_raises(self):
        """Test that a window without samples raises EmptyWindow."""
        with pytest.raises(EmptyWindow):
            preintegrate([], frame_i=3, frame_j=4)

    def test_non_positive_dt_raises(self):
        """Test that a zero or negative sample interval is rejected."""
        gyro, accel, dt = constant_samples([0.0, 0.0, 0.0], -GRAVITY, duration=0.05)
        dt[3] = 0.0

        with pytest.raises(ValueError):
            preintegrate((gyro, accel, dt))

    def test_covariance_is_symmetric_positive_definite(self, rng):
        """Test that the accumulated covariance is SPD and whitens to identity."""
        samples = (rng.normal(scale=0.5, size=(40, 3)), rng.normal(size=(40, 3)) - GRAVITY, np.full(40, 0.005))

        factor = preintegrate(samples, noise=ImuNoise())

        np.testing.assert_allclose(factor.covariance, factor.covariance.T)
        assert np.all(np.linalg.eigvalsh(factor.covariance) > 0)
        W = factor.sqrt_information
        np.testing.assert_allclose(W @ factor.covariance @ W.T, np.eye(15), atol=1e-6)


@pytest.mark.unit
class TestBiasCorrection:
    """Test the first-order bias-correction Jacobians."""

    def test_first_order_update_matches_reintegration(self, rng):
        """Test that corrected deltas approximate reintegration at a nearby bias to second order."""
        samples = (rng.normal(scale=0.5, size=(100, 3)), rng.normal(size=(100, 3)) - GRAVITY, np.full(100, 0.005))
        bg, ba = np.zeros(3), np.zeros(3)
        dbg = np.array([1e-3, -2e-3, 1.5e-3])
        dba = np.array([-1e-2, 5e-3, 2e-2])

        base = preintegrate(samples, bg, ba)
        moved = preintegrate(samples, bg + dbg, ba + dba)

        dv = base.delta_velocity + base.dv_dbg @ dbg + base.dv_dba @ dba
        dp = base.delta_position + base.dp_dbg @ dbg + base.dp_dba @ dba
        dR = base.delta_rotation.matrix() @ Rotation.from_rotvec(base.dR_dbg @ dbg).matrix()
        np.testing.assert_allclose(dv, moved.delta_velocity, atol=5e-5)
        np.testing.assert_allclose(dp, moved.delta_position, atol=5e-5)
        np.testing.assert_allclose(dR, moved.delta_rotation.matrix(), atol=5e-5)

    def test_residual_vanishes_when_states_integrate_measurements(self, rng):
        """Test that states propagated with the measured deltas give a zero residual."""
        samples = (rng.normal(scale=0.5, size=(60, 3)), rng.normal(size=(60, 3)) - GRAVITY, np.full(60, 0.005))
        bg, ba = rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3)
        factor = preintegrate(samples, bg, ba, gravity=GRAVITY)
        R_i = Rotation.from_rotvec([0.1, -0.3, 0.2]).matrix()
        p_i, v_i = np.array([1.0, 2.0, 0.5]), np.array([0.3, -0.1, 0.0])
        R_j, p_j, v_j = factor.predict(R_i, p_i, v_i)
        states = two_keyframe_states(R_i, p_i, v_i, R_j, p_j, v_j, bg, ba)

        result = eval_imu(factor, states)

        np.testing.assert_allclose(result.residual, np.zeros(15), atol=1e-9)
        assert set(result.jacobians) == {'pose_i', 'motion_i', 'pose_j', 'motion_j'}
