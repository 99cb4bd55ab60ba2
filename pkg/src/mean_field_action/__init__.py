#!/usr/bin/env python3
"""
Mean-field action package

Interaction-action minimization over particle path ensembles, generalized
Vlasov flows by characteristic fixed-point iteration, relaxed energies over
martingale kernel mixtures, and one-dimensional Eulerian transport with an
HJB check.
"""

__version__ = "1.0.0"
__license__ = "MIT"

from .core import (DiscreteStatistic, EndpointCoupling, MeanFieldError, NumericalError,
                   PathEnsemble, PhasePoint, TimeGrid, ValidationError, VelocityKernel)
from .potentials import MeanFieldLagrangian, PotentialSpec, audit_growth
from .action import action, action_gradient, phi
from .wasserstein import wp
from .nbody import OptimizeOptions, convergence_experiment, el_residual, optimize
from .vlasov import acceleration, dobrushin_solve, stability_experiment, weak_vlasov_residual
from .relaxation import KernelMixture, convex_order_check, recovery_ensemble, relax
from .ot_hjb import EulerianField1D, SpaceGrid, hjb_residual, solve_free_endpoint
from .config_manager import ConfigError, ConfigManager, RunConfig
from .artifact_manager import ArtifactManager


def optimize_paths(starts, ends, T: float = 1.0, steps: int = 50, psi='quadratic_kinetic', U=None):
    """
    Simple entry point for one-off minimizations.

    Args:
        starts: Start positions, shape (N, d)
        ends: End positions, shape (N, d)
        T: Horizon
        steps: Number of time steps
        psi: Kinetic potential as a kind name or config entry
        U: Pair interaction as a kind name or config entry (None for none)

    Returns:
        OptimizeReport with the optimized ensemble

    Example:
        report = optimize_paths([[0.0], [1.0]], [[0.0], [1.0]], U={'name': 'quadratic_position',
                                                                   'params': {'kappa': 50}})
    """
    coupling = EndpointCoupling.uniform(starts, ends)
    return optimize(coupling, TimeGrid(T, steps), PotentialSpec.from_config(psi),
                    PotentialSpec.from_config(U))


__all__ = [
    'DiscreteStatistic',
    'EndpointCoupling',
    'MeanFieldError',
    'NumericalError',
    'PathEnsemble',
    'PhasePoint',
    'TimeGrid',
    'ValidationError',
    'VelocityKernel',
    'MeanFieldLagrangian',
    'PotentialSpec',
    'audit_growth',
    'action',
    'action_gradient',
    'phi',
    'wp',
    'OptimizeOptions',
    'convergence_experiment',
    'el_residual',
    'optimize',
    'acceleration',
    'dobrushin_solve',
    'stability_experiment',
    'weak_vlasov_residual',
    'KernelMixture',
    'convex_order_check',
    'recovery_ensemble',
    'relax',
    'EulerianField1D',
    'SpaceGrid',
    'hjb_residual',
    'solve_free_endpoint',
    'ConfigError',
    'ConfigManager',
    'RunConfig',
    'ArtifactManager',
    'optimize_paths',  # Convenience function
]
