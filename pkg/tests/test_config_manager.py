"""Test suite for the configuration manager."""
from pathlib import Path

import pytest

from mean_field_action import ConfigError, ConfigManager, PotentialSpec, TimeGrid
from mean_field_action.config_manager import worker_threads
from mean_field_action.nbody import OptimizeOptions

REPO_CONFIG = Path(__file__).resolve().parents[1] / 'config.yaml'


def test_defaults_validate():
    """Test the built-in defaults form a valid configuration."""
    assert ConfigManager().validate_config()


def test_repository_config_validates():
    """Test the shipped config.yaml loads and validates."""
    config = ConfigManager(str(REPO_CONFIG))
    assert config.validate_config()
    assert config.get('optimizer.gtol') == 1e-8


def test_missing_file():
    """Test a missing file raises instead of falling back to defaults."""
    with pytest.raises(ConfigError):
        ConfigManager('/nonexistent/config.yaml')


def test_invalid_yaml(tmp_path):
    """Test unparsable documents raise."""
    path = tmp_path / 'broken.yaml'
    path.write_text("run: [unclosed\n", encoding='utf-8')
    with pytest.raises(ConfigError):
        ConfigManager(str(path))


def test_non_mapping_document(tmp_path):
    """Test a top-level list is rejected."""
    path = tmp_path / 'list.yaml'
    path.write_text("- optimize\n- relax\n", encoding='utf-8')
    with pytest.raises(ConfigError):
        ConfigManager(str(path))


def test_empty_document_uses_defaults(tmp_path):
    """Test an empty file keeps the defaults."""
    path = tmp_path / 'empty.yaml'
    path.write_text("", encoding='utf-8')
    assert ConfigManager(str(path)).get('grid.steps') == 50


def test_partial_document_is_merged(write_config):
    """Test file values override defaults section by section."""
    config = ConfigManager(write_config({'grid': {'steps': 12}}))
    assert config.get('grid.steps') == 12
    assert config.get('grid.T') == 1.0


def test_unknown_keys_are_rejected(write_config):
    """Test misspelled keys are reported with their path."""
    config = ConfigManager(write_config({'grid': {'step': 5}, 'extra': 1}))
    with pytest.raises(ConfigError) as excinfo:
        config.validate_config()
    problems = excinfo.value.details['problems']
    assert 'unknown key grid.step' in problems
    assert 'unknown key extra' in problems


def test_free_form_sections_accept_any_keys(write_config):
    """Test potential parameters are checked by the catalog, not the defaults."""
    config = ConfigManager(write_config({'potentials': {
        'U': {'name': 'flocking', 'params': {'kappa': 1.0, 'c': 2.0}}}}))
    assert config.validate_config()


@pytest.mark.parametrize("document", [
    {'grid': {'steps': 0}},
    {'grid': {'T': -1.0}},
    {'hjb': {'particles': 11}},
    {'run': {'command': 'walk'}},
    {'run': {'seed': -1}},
    {'experiment': {'n_values': [4]}},
    {'experiment': {'pairing': 'cauchy'}},
    {'potentials': {'psi': {'name': 'harmonic'}}},
    {'potentials': {'U': {'name': 'flocking', 'params': {'sigma': 1.0}}}},
])
def test_range_errors(document, write_config):
    """Test out-of-range values raise."""
    with pytest.raises(ConfigError):
        ConfigManager(write_config(document)).validate_config()


def test_exponent_without_dot_is_a_string(tmp_path):
    """Test YAML's 1e-8 string is caught by the range check."""
    path = tmp_path / 'exponent.yaml'
    path.write_text("optimizer:\n  gtol: 1e-8\n", encoding='utf-8')
    config = ConfigManager(str(path))
    assert config.get('optimizer.gtol') == '1e-8'
    with pytest.raises(ConfigError):
        config.validate_config()


def test_update_from_cli():
    """Test non-None CLI values override the document."""
    config = ConfigManager()
    config.update_from_cli({'seed': 5, 'out': 'elsewhere', 'command': None, 'log_level': 'DEBUG'})
    assert config.get('run.seed') == 5
    assert config.get('output.directory') == 'elsewhere'
    assert config.get('run.command') == 'optimize'
    assert config.get('logging.level') == 'DEBUG'


def test_save_round_trip(tmp_path):
    """Test a saved configuration reloads with the same values."""
    config = ConfigManager()
    config.set('grid.steps', 7)
    path = tmp_path / 'saved.yaml'
    assert config.save_config(str(path))
    assert ConfigManager(str(path)).get('grid.steps') == 7
    assert not ConfigManager().save_config()


def test_run_config_types(monkeypatch):
    """Test the typed view of the defaults."""
    monkeypatch.delenv('MFA_THREADS', raising=False)
    run = ConfigManager().run_config()
    assert run.grid == TimeGrid(1.0, 50)
    assert run.psi == PotentialSpec('quadratic_kinetic')
    assert run.U.is_zero()
    assert isinstance(run.optimizer, OptimizeOptions)
    assert run.output_dir == Path('results')
    assert run.threads == 1


def test_get_missing_key_returns_default():
    """Test dotted lookups fall back to the default."""
    assert ConfigManager().get('grid.missing.deeper', 'fallback') == 'fallback'


def test_worker_threads(monkeypatch):
    """Test MFA_THREADS parsing."""
    monkeypatch.setenv('MFA_THREADS', '3')
    assert worker_threads() == 3
    for bad in ('abc', '0'):
        monkeypatch.setenv('MFA_THREADS', bad)
        with pytest.raises(ConfigError):
            worker_threads()
