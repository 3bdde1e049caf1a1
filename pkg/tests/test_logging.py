"""
Tests for the structured logging configuration.
"""
import json
import logging

import numpy as np
import pytest
import structlog

from src.config import load_settings
from src.logging_config import configure_from_settings, configure_logging, get_logger


@pytest.fixture
def restore_logging():
    """Put the root logger and structlog back the way the test found them."""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in root.handlers[:]:
        if handler not in handlers:
            root.removeHandler(handler)
            handler.close()
    root.setLevel(level)
    structlog.reset_defaults()


def records(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@pytest.mark.unit
class TestConfigureLogging:
    """Test structlog and stdlib logging setup."""

    def test_json_lines_carry_context(self, restore_logging, tmp_path):
        """Test that events are written as JSON with level, logger name, timestamp and keyword context."""
        configure_logging(log_level='INFO', log_dir=tmp_path / 'logs')

        get_logger('src.solver').info("lm_finished", iterations=10, final_cost=1.5e-3)

        entry = records(tmp_path / 'logs' / 'planeba.log')[-1]
        assert entry['event'] == 'lm_finished'
        assert entry['level'] == 'info'
        assert entry['logger'] == 'src.solver'
        assert entry['iterations'] == 10
        assert entry['final_cost'] == 1.5e-3
        assert 'timestamp' in entry

    def test_level_filters_events(self, restore_logging, tmp_path):
        """Test that events below the configured level are dropped."""
        configure_logging(log_level='warning', log_dir=tmp_path)

        log = get_logger('src.bench')
        log.info("pipeline_finished", variant='VIP')
        log.warning("plane_points_skipped", skipped=2)

        assert [e['event'] for e in records(tmp_path / 'planeba.log')] == ['plane_points_skipped']

    def test_unknown_level_name_falls_back_to_info(self, restore_logging):
        """Test that an unrecognised level name configures INFO."""
        configure_logging(log_level='chatty')

        assert restore_logging.level == logging.INFO

    def test_debug_uses_console_renderer(self, restore_logging, tmp_path):
        """Test that debug mode renders readable console lines instead of JSON."""
        configure_logging(debug=True, log_level='DEBUG', log_dir=tmp_path)

        get_logger('src.assembly').debug("problem_assembled", variant='VI_CP')

        line = (tmp_path / 'planeba.log').read_text().splitlines()[-1]
        assert 'problem_assembled' in line
        with pytest.raises(json.JSONDecodeError):
            json.loads(line)

    def test_bound_context_is_kept(self, restore_logging, tmp_path):
        """Test that context bound to a logger appears on every event."""
        configure_logging(log_dir=tmp_path)

        log = get_logger('src.bench').bind(dataset='room-small-42')
        log.info("pipeline_finished", variant='VI')
        log.error("pipeline_failed", variant='VIP', error='InvalidProblem: empty')

        entries = records(tmp_path / 'planeba.log')
        assert [e['dataset'] for e in entries[-2:]] == ['room-small-42', 'room-small-42']
        assert entries[-1]['level'] == 'error'

    def test_configure_from_settings(self, restore_logging):
        """Test that the testing settings configure a WARNING root logger."""
        configure_from_settings(load_settings('testing'))

        assert restore_logging.level == logging.WARNING

    def test_numpy_values_become_json_numbers(self, restore_logging, tmp_path):
        """Test that numpy scalars and arrays in an event are written as plain JSON values."""
        configure_logging(log_dir=tmp_path)

        get_logger('src.solver').info("lm_iteration", iteration=np.int64(3), cost=np.float64(0.5),
                                      step=np.array([1.0, 2.0]))

        entry = records(tmp_path / 'planeba.log')[-1]
        assert entry['iteration'] == 3
        assert entry['cost'] == 0.5
        assert entry['step'] == [1.0, 2.0]
