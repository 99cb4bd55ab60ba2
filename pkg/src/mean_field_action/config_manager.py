#!/usr/bin/env python3
"""
Configuration Manager for mean-field-action runs

Loads a YAML (or JSON) run document, merges it over the defaults, applies CLI
overrides and validates the result into a typed RunConfig.
"""

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import structlog
import yaml

from .core import TimeGrid, ValidationError
from .nbody import PAIRINGS, OptimizeOptions
from .potentials import PotentialSpec

logger = structlog.get_logger(__name__)

COMMANDS = ('optimize', 'vlasov', 'relax', 'converge', 'hjb', 'audit')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')
PRESETS = ('crossing', 'exchange')
THREADS_ENV = 'MFA_THREADS'

# Subtrees whose keys are not fixed by the defaults.
FREE_FORM = frozenset({
    'potentials.psi', 'potentials.U', 'experiment.sampler', 'hjb.mu0', 'hjb.muT',
})


class ConfigError(ValidationError):
    """Invalid run configuration."""


class ConfigManager:
    """Manages configuration for mean-field-action runs."""

    DEFAULT_CONFIG = {
        'run': {
            'command': 'optimize',
            'seed': 0,
            'dimension': 1,
        },
        'potentials': {
            'psi': {'name': 'quadratic_kinetic', 'params': {}},
            'U': {'name': 'zero', 'params': {}},
        },
        'grid': {
            'T': 1.0,
            'steps': 50,
        },
        'endpoints': {
            'preset': None,
            'starts': [[0.0], [1.0]],
            'ends': [[0.0], [1.0]],
            'weights': None,
        },
        'statistic': {
            'positions': [[0.0], [0.0]],
            'velocities': [[1.0], [-1.0]],
            'weights': [0.5, 0.5],
        },
        'optimizer': {
            'gtol': 1e-8,
            'max_iter': 20000,
            'memory': 10,
            'ftol': 1e-15,
            'max_line_search': 40,
            'raise_on_failure': False,
        },
        'relaxation': {
            'radius': None,
            'points': 61,
            'components': 4,
            'starts': 8,
            'max_rounds': 60,
            'max_iter': 200,
            'tol': 1e-10,
            'recovery_k': [],
            'expected_split': None,
        },
        'vlasov': {
            'fptol': 1e-10,
            'max_picard': 60,
            'newton_tol': 1e-12,
            'bumps': 8,
            'perturbations': [],
        },
        'hjb': {
            'a': -1.0,
            'b': 4.0,
            'cells': 10,
            'particles': 10,
            'mu0': {'low': 0.0, 'high': 1.0},
            'muT': {'low': 1.0, 'high': 3.0},
            'threshold': 1e-6,
            'perturbation': 0.5,
        },
        'experiment': {
            'n_values': [2, 4, 8, 16],
            'pairing': 'quadruple',
            'sampler': {'kind': 'uniform_shift', 'params': {}},
        },
        'output': {
            'directory': 'results',
            'include_timing': False,
        },
        'logging': {
            'level': 'INFO',
            'log_file': 'mfa.log',
            'console_logging': True,
            'file_logging': False,
        },
    }

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize the configuration manager.

        Args:
            config_file: Path to a YAML or JSON run document (optional)
        """
        self.config_file = Path(config_file) if config_file else None
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, Any]:
        config = copy.deepcopy(self.DEFAULT_CONFIG)
        if self.config_file is None:
            logger.debug("config_defaults_used")
            return config
        if not self.config_file.exists():
            raise ConfigError(f"configuration file not found: {self.config_file}")
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                file_config = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"failed to read configuration from {self.config_file}",
                              {'reason': str(e)}) from e
        if file_config is None:
            logger.warning("config_file_empty", path=str(self.config_file))
            return config
        if not isinstance(file_config, dict):
            raise ConfigError("configuration document must be a mapping",
                              {'path': str(self.config_file)})
        logger.info("config_loaded", path=str(self.config_file))
        return self._deep_merge(config, file_config)

    def _deep_merge(self, base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
        result = dict(base)
        for key, value in override.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value
        return result

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a configuration value using dot notation.

        Args:
            key: Configuration key (e.g., 'grid.steps')
            default: Default value if key not found
        """
        value = self.config
        try:
            for k in key.split('.'):
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        keys = key.split('.')
        config = self.config
        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]
        config[keys[-1]] = value

    def update_from_cli(self, cli_args: Dict[str, Any]) -> None:
        """
        Update configuration from CLI arguments.

        Args:
            cli_args: Dictionary of CLI arguments; None values are ignored
        """
        cli_mapping = {
            'command': 'run.command',
            'seed': 'run.seed',
            'out': 'output.directory',
            'log_level': 'logging.level',
            'log_file': 'logging.log_file',
        }
        for cli_key, config_key in cli_mapping.items():
            if cli_args.get(cli_key) is not None:
                self.set(config_key, cli_args[cli_key])
                logger.debug("config_cli_override", key=config_key, value=cli_args[cli_key])

    def save_config(self, filename: Optional[str] = None) -> bool:
        """
        Save current configuration to file.

        Returns:
            True if successful, False otherwise
        """
        output_file = Path(filename) if filename else self.config_file
        if output_file is None:
            logger.error("config_save_without_target")
            return False
        try:
            with open(output_file, 'w', encoding='utf-8') as f:
                yaml.safe_dump(self.config, f, default_flow_style=False, indent=2, sort_keys=False)
            logger.info("config_saved", path=str(output_file))
            return True
        except OSError as e:
            logger.error("config_save_failed", path=str(output_file), error=str(e))
            return False

    def _unknown_keys(self, config: Mapping[str, Any], defaults: Mapping[str, Any],
                      prefix: str = '') -> List[str]:
        unknown = []
        for key, value in config.items():
            path = f"{prefix}{key}"
            if key not in defaults:
                unknown.append(path)
            elif path in FREE_FORM:
                continue
            elif isinstance(defaults[key], dict):
                if not isinstance(value, dict):
                    unknown.append(f"{path} (expected a mapping)")
                else:
                    unknown.extend(self._unknown_keys(value, defaults[key], path + '.'))
        return unknown

    def _range_errors(self) -> List[str]:
        errors = []

        def check(key: str, ok, message: str) -> None:
            value = self.get(key)
            try:
                passed = bool(ok(value))
            except (TypeError, ValueError):
                passed = False
            if not passed:
                errors.append(f"{key} {message} (got {value!r})")

        positive = lambda v: v > 0  # noqa: E731
        integer = lambda v: isinstance(v, int) and not isinstance(v, bool)  # noqa: E731

        check('run.command', lambda v: v in COMMANDS, f"must be one of {list(COMMANDS)}")
        check('run.seed', lambda v: integer(v) and v >= 0, "must be a nonnegative integer")
        check('run.dimension', lambda v: integer(v) and v >= 1, "must be a positive integer")
        check('grid.T', positive, "must be positive")
        check('grid.steps', lambda v: integer(v) and v >= 1, "must be a positive integer")
        check('endpoints.preset', lambda v: v is None or v in PRESETS, f"must be null or one of {list(PRESETS)}")
        check('optimizer.gtol', positive, "must be positive")
        check('optimizer.max_iter', lambda v: integer(v) and v >= 1, "must be a positive integer")
        check('optimizer.ftol', positive, "must be positive")
        check('relaxation.radius', lambda v: v is None or v > 0, "must be null or positive")
        check('relaxation.points', lambda v: integer(v) and v >= 2, "must be an integer >= 2")
        check('relaxation.components', lambda v: integer(v) and v >= 1, "must be a positive integer")
        check('relaxation.recovery_k', lambda v: all(integer(k) and k >= 1 for k in v),
              "must be a list of positive integers")
        check('vlasov.fptol', positive, "must be positive")
        check('vlasov.max_picard', lambda v: integer(v) and v >= 1, "must be a positive integer")
        check('vlasov.perturbations', lambda v: all(float(p) > 0 for p in v),
              "must be a list of positive numbers")
        check('hjb.b', lambda v: v > self.get('hjb.a'), "must exceed hjb.a")
        check('hjb.cells', lambda v: integer(v) and v >= 3, "must be an integer >= 3")
        check('hjb.particles', lambda v: integer(v) and 1 <= v <= 10, "must be an integer in [1, 10]")
        check('experiment.n_values', lambda v: len(v) >= 2 and all(integer(n) and n >= 1 for n in v),
              "must list at least two positive integers")
        check('experiment.pairing', lambda v: v in PAIRINGS, f"must be one of {list(PAIRINGS)}")
        check('logging.level', lambda v: str(v).upper() in LOG_LEVELS, f"must be one of {list(LOG_LEVELS)}")
        for slot in ('psi', 'U'):
            try:
                PotentialSpec.from_config(self.get(f'potentials.{slot}'))
            except ValidationError as e:
                errors.append(f"potentials.{slot}: {e}")
        return errors

    def validate_config(self) -> bool:
        """
        Validate the current configuration.

        Raises:
            ConfigError: listing every unknown key and out-of-range value
        """
        errors = [f"unknown key {key}" for key in self._unknown_keys(self.config, self.DEFAULT_CONFIG)]
        if not errors:
            errors = self._range_errors()
        if errors:
            for error in errors:
                logger.error("config_error", problem=error)
            raise ConfigError("configuration validation failed", {'problems': errors})
        logger.debug("config_valid")
        return True

    def run_config(self) -> 'RunConfig':
        """Validated, typed view of the configuration."""
        self.validate_config()
        try:
            return RunConfig(
                command=self.get('run.command'),
                seed=int(self.get('run.seed')),
                dimension=int(self.get('run.dimension')),
                psi=PotentialSpec.from_config(self.get('potentials.psi')),
                U=PotentialSpec.from_config(self.get('potentials.U')),
                grid=TimeGrid(float(self.get('grid.T')), int(self.get('grid.steps'))),
                endpoints=copy.deepcopy(self.get('endpoints')),
                statistic=copy.deepcopy(self.get('statistic')),
                optimizer=OptimizeOptions.from_config(self.get('optimizer')),
                relaxation=copy.deepcopy(self.get('relaxation')),
                vlasov=copy.deepcopy(self.get('vlasov')),
                hjb=copy.deepcopy(self.get('hjb')),
                experiment=copy.deepcopy(self.get('experiment')),
                output_dir=Path(self.get('output.directory')),
                include_timing=bool(self.get('output.include_timing')),
                threads=worker_threads(),
            )
        except ConfigError:
            raise
        except ValidationError as e:
            raise ConfigError(str(e), e.details) from e

    def print_config(self) -> None:
        """Print the current configuration as YAML."""
        print(yaml.safe_dump(self.config, default_flow_style=False, indent=2, sort_keys=False), end='')


@dataclass(frozen=True)
class RunConfig:
    """Typed run settings; section mappings are passed through to the commands."""
    command: str
    seed: int
    dimension: int
    psi: PotentialSpec
    U: PotentialSpec
    grid: TimeGrid
    endpoints: Dict[str, Any]
    statistic: Dict[str, Any]
    optimizer: OptimizeOptions
    relaxation: Dict[str, Any]
    vlasov: Dict[str, Any]
    hjb: Dict[str, Any]
    experiment: Dict[str, Any]
    output_dir: Path
    include_timing: bool = False
    threads: int = 1


def worker_threads() -> int:
    """Worker cap from MFA_THREADS (default 1)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == '':
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer", {'value': raw})
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer", {'value': raw})
    return threads
