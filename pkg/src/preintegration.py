"""
IMU preintegration between consecutive keyframes.

Deltas are accumulated with first-order bias Jacobians so a change of the
bias estimate does not require re-integration. Residual ordering is
``(dtheta, dv, dp, dbg, dba)``; the covariance uses the same ordering.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from src.errors import EmptyWindow
from src.geometry import (
    IDENTITY3,
    Rotation,
    right_jacobian,
    right_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
)
from src.state import FactorEvaluation


@dataclass(frozen=True)
class ImuNoise:
    """Continuous-time noise densities assumed by the estimator."""

    gyro_noise: float = 1.7e-4    # rad/s/sqrt(Hz)
    accel_noise: float = 2e-3     # m/s^2/sqrt(Hz)
    gyro_walk: float = 1e-5       # rad/s^2/sqrt(Hz)
    accel_walk: float = 1e-4      # m/s^3/sqrt(Hz)
    integration_sigma: float = 1e-4

    @classmethod
    def from_settings(cls, settings):
        return cls(
            gyro_noise=settings['IMU_GYRO_NOISE'],
            accel_noise=settings['IMU_ACCEL_NOISE'],
            gyro_walk=settings['IMU_GYRO_WALK'],
            accel_walk=settings['IMU_ACCEL_WALK'],
            integration_sigma=settings['IMU_INTEGRATION_SIGMA'],
        )


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    frame_i: int
    frame_j: int
    delta_rotation: Rotation
    delta_velocity: np.ndarray
    delta_position: np.ndarray
    dR_dbg: np.ndarray
    dv_dbg: np.ndarray
    dv_dba: np.ndarray
    dp_dbg: np.ndarray
    dp_dba: np.ndarray
    covariance: np.ndarray
    sqrt_information: np.ndarray
    gravity: np.ndarray
    duration: float
    gyro_bias: np.ndarray
    accel_bias: np.ndarray
    sample_count: int

    def predict(self, R_i, p_i, v_i):
        """Body rotation, position and velocity at frame j at the linearisation bias."""
        dt = self.duration
        R_j = R_i @ self.delta_rotation.matrix()
        v_j = v_i + self.gravity * dt + R_i @ self.delta_velocity
        p_j = p_i + v_i * dt + 0.5 * self.gravity * dt ** 2 + R_i @ self.delta_position
        return R_j, p_j, v_j


def _as_arrays(samples):
    if isinstance(samples, tuple) and len(samples) == 3 and np.ndim(samples[0]) == 2:
        gyro, accel, dt = samples
    else:
        samples = list(samples)
        if not samples:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
        gyro = [s[0] for s in samples]
        accel = [s[1] for s in samples]
        dt = [s[2] for s in samples]
    return (np.asarray(gyro, dtype=float).reshape(-1, 3),
            np.asarray(accel, dtype=float).reshape(-1, 3),
            np.asarray(dt, dtype=float).reshape(-1))


def preintegrate(samples, gyro_bias=None, accel_bias=None, noise=None,
                 gravity=(0.0, 0.0, -9.81), frame_i=0, frame_j=1):
    """
    Integrate IMU samples between two keyframes.

    Args:
        samples: iterable of ``(gyro, accel, dt)`` or a tuple of arrays
            ``(gyro (N,3), accel (N,3), dt (N,))``; sample k acts over ``dt[k]``
        gyro_bias, accel_bias: linearisation biases
        noise: ImuNoise
        gravity: world gravity vector

    Raises:
        EmptyWindow: no samples
        ValueError: non-positive dt
    """
    gyro, accel, dts = _as_arrays(samples)
    if len(dts) == 0:
        raise EmptyWindow(f"no IMU samples between keyframes {frame_i} and {frame_j}")
    if np.any(dts <= 0) or not np.all(np.isfinite(dts)):
        raise ValueError("IMU sample dt must be positive")
    noise = noise or ImuNoise()
    bg = np.zeros(3) if gyro_bias is None else np.asarray(gyro_bias, dtype=float)
    ba = np.zeros(3) if accel_bias is None else np.asarray(accel_bias, dtype=float)

    w_hat = gyro - bg
    a_hat = accel - ba
    dRk_all = so3_exp(w_hat * dts[:, None])
    Jr_all = right_jacobian(w_hat * dts[:, None])

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    dR_dbg = np.zeros((3, 3))
    dv_dbg = np.zeros((3, 3))
    dv_dba = np.zeros((3, 3))
    dp_dbg = np.zeros((3, 3))
    dp_dba = np.zeros((3, 3))
    cov = np.zeros((9, 9))
    A = np.eye(9)
    Bg = np.zeros((9, 3))
    Ba = np.zeros((9, 3))

    for k in range(len(dts)):
        dt = dts[k]
        a = a_hat[k]
        dRk = dRk_all[k]
        a_skew = skew(a)
        dR_a_skew = dR @ a_skew

        A[0:3, 0:3] = dRk.T
        A[3:6, 0:3] = -dR_a_skew * dt
        A[6:9, 0:3] = -0.5 * dR_a_skew * dt ** 2
        A[6:9, 3:6] = IDENTITY3 * dt
        Bg[0:3] = Jr_all[k] * dt
        Ba[3:6] = dR * dt
        Ba[6:9] = 0.5 * dR * dt ** 2
        cov = (A @ cov @ A.T
               + (noise.gyro_noise ** 2 / dt) * (Bg @ Bg.T)
               + (noise.accel_noise ** 2 / dt) * (Ba @ Ba.T))
        cov[6:9, 6:9] += noise.integration_sigma ** 2 * dt * IDENTITY3

        dp_dba += dv_dba * dt - 0.5 * dR * dt ** 2
        dp_dbg += dv_dbg * dt - 0.5 * dR_a_skew @ dR_dbg * dt ** 2
        dv_dba += -dR * dt
        dv_dbg += -dR_a_skew @ dR_dbg * dt
        dR_dbg = dRk.T @ dR_dbg - Jr_all[k] * dt

        dp = dp + dv * dt + 0.5 * dR @ a * dt ** 2
        dv = dv + dR @ a * dt
        dR = dR @ dRk

    duration = float(dts.sum())
    covariance = np.zeros((15, 15))
    covariance[:9, :9] = 0.5 * (cov + cov.T)
    covariance[9:12, 9:12] = noise.gyro_walk ** 2 * duration * IDENTITY3
    covariance[12:15, 12:15] = noise.accel_walk ** 2 * duration * IDENTITY3

    # W such that W.T @ W = inverse(covariance)
    L = cholesky(covariance, lower=True)
    sqrt_information = solve_triangular(L, np.eye(15), lower=True)

    return PreintegratedImu(
        frame_i=int(frame_i),
        frame_j=int(frame_j),
        delta_rotation=Rotation.from_matrix(dR),
        delta_velocity=dv,
        delta_position=dp,
        dR_dbg=dR_dbg,
        dv_dbg=dv_dbg,
        dv_dba=dv_dba,
        dp_dbg=dp_dbg,
        dp_dba=dp_dba,
        covariance=covariance,
        sqrt_information=sqrt_information,
        gravity=np.asarray(gravity, dtype=float).copy(),
        duration=duration,
        gyro_bias=bg.copy(),
        accel_bias=ba.copy(),
        sample_count=len(dts),
    )


def imu_residual(factor, R_i, p_i, v_i, bg_i, ba_i, R_j, p_j, v_j, bg_j, ba_j, jacobians=True):
    """
    Raw 15-vector residual and Jacobians for body states i and j.

    Jacobian blocks are keyed ``pose_i``/``pose_j`` (15x6, increments
    ``[dt, dtheta]``) and ``motion_i``/``motion_j`` (15x9, ``[v, bg, ba]``).
    """
    dt = factor.duration
    g = factor.gravity
    dbg = bg_i - factor.gyro_bias
    dba = ba_i - factor.accel_bias

    phi_bg = factor.dR_dbg @ dbg
    dR_corr = factor.delta_rotation.matrix() @ so3_exp(phi_bg)
    dv_corr = factor.delta_velocity + factor.dv_dbg @ dbg + factor.dv_dba @ dba
    dp_corr = factor.delta_position + factor.dp_dbg @ dbg + factor.dp_dba @ dba

    RiT = R_i.T
    E = dR_corr.T @ RiT @ R_j
    r_theta = so3_log(E)
    w = v_j - v_i - g * dt
    u = p_j - p_i - v_i * dt - 0.5 * g * dt ** 2

    residual = np.concatenate([
        r_theta,
        RiT @ w - dv_corr,
        RiT @ u - dp_corr,
        bg_j - bg_i,
        ba_j - ba_i,
    ])
    if not jacobians:
        return residual, {}

    Jr_inv = right_jacobian_inv(r_theta)
    RjT = R_j.T

    J_pose_i = np.zeros((15, 6))
    J_pose_i[0:3, 3:6] = -Jr_inv @ RjT
    J_pose_i[3:6, 3:6] = RiT @ skew(w)
    J_pose_i[6:9, 0:3] = -RiT
    J_pose_i[6:9, 3:6] = RiT @ skew(u)

    J_pose_j = np.zeros((15, 6))
    J_pose_j[0:3, 3:6] = Jr_inv @ RjT
    J_pose_j[6:9, 0:3] = RiT

    J_motion_i = np.zeros((15, 9))
    J_motion_i[0:3, 3:6] = -Jr_inv @ E.T @ right_jacobian(phi_bg) @ factor.dR_dbg
    J_motion_i[3:6, 0:3] = -RiT
    J_motion_i[3:6, 3:6] = -factor.dv_dbg
    J_motion_i[3:6, 6:9] = -factor.dv_dba
    J_motion_i[6:9, 0:3] = -RiT * dt
    J_motion_i[6:9, 3:6] = -factor.dp_dbg
    J_motion_i[6:9, 6:9] = -factor.dp_dba
    J_motion_i[9:12, 3:6] = -IDENTITY3
    J_motion_i[12:15, 6:9] = -IDENTITY3

    J_motion_j = np.zeros((15, 9))
    J_motion_j[3:6, 0:3] = RiT
    J_motion_j[9:12, 3:6] = IDENTITY3
    J_motion_j[12:15, 6:9] = IDENTITY3

    return residual, {
        'pose_i': J_pose_i,
        'motion_i': J_motion_i,
        'pose_j': J_pose_j,
        'motion_j': J_motion_j,
    }


def eval_imu(factor, states):
    """Raw residual and Jacobians of one preintegrated factor against a StateVector."""
    i = states.keyframe_index(factor.frame_i)
    j = states.keyframe_index(factor.frame_j)
    R = states.rotation_matrices()
    residual, jac = imu_residual(
        factor,
        R[i], states.translations[i], states.velocities[i], states.gyro_biases[i], states.accel_biases[i],
        R[j], states.translations[j], states.velocities[j], states.gyro_biases[j], states.accel_biases[j],
    )
    return FactorEvaluation(residual, jac)
