"""
Tests for configuration classes and settings documents.
"""
import pytest

from src.config import BenchmarkConfig, Config, config, load_settings
from src.errors import ConfigError


@pytest.mark.unit
class TestLoadSettings:
    """Test flattening of configuration classes."""

    def test_default_environment(self, monkeypatch):
        """Test that the default environment carries the base values."""
        monkeypatch.delenv('PLANEBA_ENV', raising=False)

        settings = load_settings()

        assert settings['VARIANT'] == 'VIP'
        assert settings['MAX_ITERATIONS'] == Config.MAX_ITERATIONS
        assert settings['SWEEP_KEYFRAMES'] == (25, 50, 100, 150, 215)

    def test_environment_variable_selects_class(self, monkeypatch):
        """Test that PLANEBA_ENV picks the configuration class."""
        monkeypatch.setenv('PLANEBA_ENV', 'benchmark')

        assert load_settings()['MAX_ITERATIONS'] == BenchmarkConfig.MAX_ITERATIONS

    def test_benchmark_protocol(self):
        """Test that the benchmark environment fixes ten iterations with no early stop."""
        settings = load_settings('benchmark')

        assert settings['MAX_ITERATIONS'] == 10
        assert settings['MAX_TIME_S'] is None
        assert settings['TOLERANCE_COST'] == 0.0
        assert settings['PLANE_SOURCE'] == 'labels'
        assert settings['ROBUST_HOMOGRAPHY'] is False

    def test_testing_environment(self):
        """Test that the testing environment is quiet and uncapped in time."""
        settings = load_settings('testing')

        assert settings['TESTING'] is True
        assert settings['LOG_LEVEL'] == config['testing'].LOG_LEVEL
        assert settings['MAX_TIME_S'] is None
        assert settings['BENCH_WARMUP'] is False

    def test_unknown_environment(self):
        """Test that an unknown environment name raises ConfigError."""
        with pytest.raises(ConfigError):
            load_settings('staging')

    def test_settings_are_independent_copies(self):
        """Test that editing one settings dict leaves the next one untouched."""
        first = load_settings('testing')
        first['MAX_ITERATIONS'] = 1

        assert load_settings('testing')['MAX_ITERATIONS'] == config['testing'].MAX_ITERATIONS


@pytest.mark.unit
class TestSettingsDocument:
    """Test key-value overrides."""

    def test_lower_case_keys_override(self):
        """Test that document keys map onto upper-case settings."""
        settings = load_settings('testing', {'max_iterations': 7, 'variant': 'VI_CP'})

        assert settings['MAX_ITERATIONS'] == 7
        assert settings['VARIANT'] == 'VI_CP'

    def test_numbers_are_coerced(self):
        """Test that numeric strings and integral floats are converted to the setting's type."""
        settings = load_settings('testing', {'max_iterations': 12.0, 'pixel_sigma_px': '0.5'})

        assert settings['MAX_ITERATIONS'] == 12
        assert isinstance(settings['MAX_ITERATIONS'], int)
        assert settings['PIXEL_SIGMA_PX'] == 0.5

    def test_boolean_strings(self):
        """Test that 'true' and 'false' strings set boolean settings."""
        settings = load_settings('testing', {'robust_homography': 'false'})

        assert settings['ROBUST_HOMOGRAPHY'] is False

    def test_lists_become_tuples(self):
        """Test that a sweep list from YAML is stored as a tuple."""
        assert load_settings('testing', {'sweep_keyframes': [10, 20]})['SWEEP_KEYFRAMES'] == (10, 20)

    def test_null_clears_time_cap(self):
        """Test that a null time cap disables the wall-clock limit."""
        assert load_settings('default', {'max_time_s': None})['MAX_TIME_S'] is None

    @pytest.mark.parametrize('document', [
        {'max_iteration': 10},
        {'max_iterations': 2.5},
        {'max_iterations': True},
        {'pixel_sigma_px': 'wide'},
        {'robust_homography': 'sometimes'},
        {'sweep_keyframes': 50},
        {'homography_topology': 'ring'},
        {'plane_source': 'oracle'},
        {'storage_format': 'hdf5'},
        {'max_iterations': -1},
        {'max_time_s': 0.0},
        {'pixel_sigma_px': 0.0},
    ])
    def test_invalid_documents(self, document):
        """Test that unknown keys, wrong types and out-of-range values raise ConfigError."""
        with pytest.raises(ConfigError):
            load_settings('testing', document)
