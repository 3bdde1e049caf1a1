import os

from src.errors import ConfigError


class Config:
    """Base configuration with default values."""
    # Application
    APP_NAME = 'PlaneBA'
    DEBUG = False
    TESTING = False

    # Logging
    LOG_LEVEL = os.environ.get('PLANEBA_LOG_LEVEL', 'INFO')
    LOG_DIR = os.environ.get('PLANEBA_LOG_DIR')

    # Storage root for generated datasets and results
    DATA_DIR = os.environ.get('PLANEBA_DATA_DIR', 'data')
    STORAGE_FORMAT = 'text'  # text | npz

    # Bundle adjustment variant and homography pair topology
    VARIANT = 'VIP'
    HOMOGRAPHY_TOPOLOGY = 'star'  # star | chain

    # Levenberg-Marquardt (global BA caps)
    MAX_ITERATIONS = 100
    MAX_TIME_S = 2.0
    DAMPING_INIT = 1e-4  # times the largest diagonal entry
    DAMPING_INCREASE = 2.0
    DAMPING_DECREASE = 1.0 / 3.0
    DAMPING_RETRIES = 10
    TOLERANCE_COST = 1e-8
    TOLERANCE_GRADIENT = 1e-10
    TOLERANCE_PARAMETER = 1e-10
    JACOBI_SCALING = True

    # Local BA window
    LBA_WINDOW = 20
    LBA_MAX_ITERATIONS = 10
    LBA_MAX_TIME_S = 0.2
    LBA_ELIMINATE_PLANE_POINTS = True

    # Factor noise (pixels are converted with the focal length)
    PIXEL_SIGMA_PX = 1.0
    DEPTH_SIGMA_REL = 0.0017
    DEPTH_SIGMA_MIN = 1e-4
    HOMOGRAPHY_SIGMA_PX = 1.5
    POINT_TO_PLANE_SIGMA = 0.02
    HUBER_DELTA = 2.0  # whitened units
    ROBUST_HOMOGRAPHY = True
    EIGEN_CUTOFF = 1e-12

    # IMU noise assumed by the estimator
    IMU_GYRO_NOISE = 1.7e-4
    IMU_ACCEL_NOISE = 2e-3
    IMU_GYRO_WALK = 1e-5
    IMU_ACCEL_WALK = 1e-4
    IMU_INTEGRATION_SIGMA = 1e-4

    # Pose-plane graph
    GRAPH_ROT_SIGMA_DEG = 0.5
    GRAPH_TRANS_SIGMA = 0.02
    GRAPH_LOOP_ROT_SIGMA_DEG = 0.5
    GRAPH_LOOP_TRANS_SIGMA = 0.02
    GRAPH_PLANE_SIGMA = 0.05
    GRAPH_MIN_PLANE_POINTS = 6
    GRAPH_MAX_ITERATIONS = 50

    # Plane detection
    PLANE_SOURCE = 'detect'  # detect | labels
    DETECT_ANGLE_DEG = 10.0
    DETECT_DISTANCE = 0.05
    DETECT_HEIGHT_BIN = 0.02
    DETECT_AZIMUTH_BIN_DEG = 2.0
    DETECT_MIN_SUPPORT = 50

    # Plane merging
    MERGE_ANGLE_DEG = 10.0
    MERGE_DISTANCE = 0.10

    # Point-plane association
    ASSOCIATE_DISTANCE = 0.10
    ASSOCIATE_EXTENT_MARGIN = 0.5
    ASSOCIATE_MIN_KEYFRAMES = 3
    CONSISTENCY_RELATIVE = 0.20
    CONSISTENCY_FLOOR_PX = 0.25
    CONSISTENCY_MAX_PX = 2.0
    CONSISTENCY_STRIKES = 3

    # Pipeline initialisation drift
    PERTURB_ROT_DEG = 0.1
    PERTURB_TRANS = 0.01

    # Benchmark runner
    BENCH_WARMUP = True
    BENCH_PARALLEL = False
    SWEEP_KEYFRAMES = (25, 50, 100, 150, 215)


class DevelopmentConfig(Config):
    """Development configuration."""
    DEBUG = True
    LOG_LEVEL = os.environ.get('PLANEBA_LOG_LEVEL', 'DEBUG')


class BenchmarkConfig(Config):
    """Timing protocol: fixed iteration count, no time cap, labelled planes."""
    MAX_ITERATIONS = 10
    MAX_TIME_S = None
    TOLERANCE_COST = 0.0
    TOLERANCE_GRADIENT = 0.0
    TOLERANCE_PARAMETER = 0.0
    PLANE_SOURCE = 'labels'
    # VI_P and VI_CP must share one quadratic objective
    ROBUST_HOMOGRAPHY = False


class TestingConfig(Config):
    """Testing configuration."""
    TESTING = True
    LOG_LEVEL = 'WARNING'
    LOG_DIR = None
    MAX_ITERATIONS = 50
    MAX_TIME_S = None
    BENCH_WARMUP = False
    PLANE_SOURCE = 'labels'


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'benchmark': BenchmarkConfig,
    'testing': TestingConfig,
    'default': Config,
}


def load_settings(env=None, document=None):
    """
    Flatten a configuration class into a dict and overlay a key-value document.

    Args:
        env: Key into ``config``; defaults to ``PLANEBA_ENV`` or ``'default'``
        document: Optional mapping with lower-case keys, e.g. ``{"max_iterations": 10}``

    Returns:
        dict of upper-case setting names to values

    Raises:
        ConfigError: unknown environment or document key, or a value of the wrong type
    """
    env = env or os.environ.get('PLANEBA_ENV', 'default')
    if env not in config:
        raise ConfigError(f"unknown configuration environment: {env!r}")

    cls = config[env]
    settings = {
        name: getattr(cls, name)
        for name in dir(cls)
        if name.isupper()
    }

    for key, value in (document or {}).items():
        name = str(key).upper()
        if name not in settings:
            raise ConfigError(f"unknown configuration key: {key!r}")
        settings[name] = _coerce(name, settings[name], value)

    _validate(settings)
    return settings


def _coerce(name, default, value):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ('true', 'false'):
            return value.lower() == 'true'
        raise ConfigError(f"{name.lower()} expects a boolean, got {value!r}")
    if isinstance(default, (int, float)):
        if isinstance(value, bool):
            raise ConfigError(f"{name.lower()} expects a number, got {value!r}")
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name.lower()} expects a number, got {value!r}")
        if isinstance(default, int):
            if not number.is_integer():
                raise ConfigError(f"{name.lower()} expects an integer, got {value!r}")
            return int(number)
        return number
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name.lower()} expects a list, got {value!r}")
        return tuple(value)
    return value


def _validate(settings):
    if settings['HOMOGRAPHY_TOPOLOGY'] not in ('star', 'chain'):
        raise ConfigError(f"homography_topology must be star or chain, got {settings['HOMOGRAPHY_TOPOLOGY']!r}")
    if settings['PLANE_SOURCE'] not in ('detect', 'labels'):
        raise ConfigError(f"plane_source must be detect or labels, got {settings['PLANE_SOURCE']!r}")
    if settings['STORAGE_FORMAT'] not in ('text', 'npz'):
        raise ConfigError(f"storage_format must be text or npz, got {settings['STORAGE_FORMAT']!r}")
    if settings['MAX_ITERATIONS'] is None or settings['MAX_ITERATIONS'] < 0:
        raise ConfigError("max_iterations must be a non-negative integer")
    if settings['MAX_TIME_S'] is not None and settings['MAX_TIME_S'] <= 0:
        raise ConfigError("max_time_s must be positive or null")
    for name in ('PIXEL_SIGMA_PX', 'HOMOGRAPHY_SIGMA_PX', 'POINT_TO_PLANE_SIGMA', 'DEPTH_SIGMA_MIN',
                 'IMU_GYRO_NOISE', 'IMU_ACCEL_NOISE', 'IMU_GYRO_WALK', 'IMU_ACCEL_WALK',
                 'GRAPH_ROT_SIGMA_DEG', 'GRAPH_TRANS_SIGMA', 'GRAPH_PLANE_SIGMA'):
        if settings[name] <= 0:
            raise ConfigError(f"{name.lower()} must be positive")
