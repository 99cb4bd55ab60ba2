"""Shared fixtures for the mean-field-action test suite."""
import logging

import numpy as np
import pytest
import yaml

from mean_field_action import DiscreteStatistic, PotentialSpec, TimeGrid


@pytest.fixture(autouse=True)
def reset_root_logging():
    """Drop handlers the CLI attaches to captured streams."""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)


@pytest.fixture
def kinetic():
    """psi = 1/2 |v|^2."""
    return PotentialSpec('quadratic_kinetic')


@pytest.fixture
def antipodal():
    """Two atoms at the origin moving apart with unit speed."""
    return DiscreteStatistic([[0.0], [0.0]], [[1.0], [-1.0]], [0.5, 0.5])


@pytest.fixture
def unit_grid():
    """Ten steps on [0, 1]."""
    return TimeGrid(1.0, 10)


@pytest.fixture
def rng():
    """Seeded generator for random instances."""
    return np.random.default_rng(20240601)


@pytest.fixture
def write_config(tmp_path):
    """Write a configuration mapping to a YAML file and return its path."""
    def write(document, name="config.yaml"):
        path = tmp_path / name
        with open(path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(document, f, default_flow_style=False)
        return str(path)
    return write
