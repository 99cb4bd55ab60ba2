"""Test suite for the generalized Vlasov solver."""
import numpy as np
import pytest

from mean_field_action import (DiscreteStatistic, PotentialSpec, TimeGrid, ValidationError,
                               acceleration, dobrushin_solve, stability_experiment,
                               weak_vlasov_residual)
from mean_field_action.potentials import combine
from mean_field_action.vlasov import bump_family, flow_statistic, gronwall_rate, total_momentum

ATTRACTION = PotentialSpec('quadratic_position', {'kappa': 1.0})


@pytest.fixture
def approaching_pair():
    """Atoms at 0 and 1 moving toward each other."""
    return DiscreteStatistic([[0.0], [1.0]], [[0.5], [-0.5]], [0.5, 0.5])


def _pair_separation(t):
    """x1 - x2 for the approaching pair under kappa = 1 attraction."""
    s = np.sqrt(2.0) * t
    return -np.cosh(s) + np.sinh(s) / np.sqrt(2.0)


def test_free_transport_is_exact(kinetic):
    """Test U = 0 moves every atom on a straight line."""
    f0 = DiscreteStatistic([[0.0, 1.0], [2.0, -1.0]], [[1.0, 0.5], [-0.3, 2.0]], [0.4, 0.6])
    grid = TimeGrid(1.0, 10)
    flow = dobrushin_solve(f0, grid, kinetic)
    expected = f0.positions[None] + grid.times[:, None, None] * f0.velocities[None]
    assert np.abs(flow.positions - expected).max() < 1e-12
    assert np.abs(flow.velocities - f0.velocities[None]).max() < 1e-12
    assert flow.picard_iterations >= 1


def test_acceleration_of_attracting_pair(approaching_pair, kinetic):
    """Test a_1 = kappa (x_1 - x_2) when psi_vv is the identity."""
    field = acceleration(approaching_pair, kinetic, ATTRACTION)
    np.testing.assert_allclose(field.accelerations, [[-1.0], [1.0]], atol=1e-12)
    assert field.residual < 1e-12
    assert field.min_singular_value > 0


def test_acceleration_of_harmonic_kinetic_term():
    """Test psi = |v|^2 - |x|^2 yields A = -x."""
    psi = combine(PotentialSpec('quadratic_kinetic', {'scale': 1.0}),
                  PotentialSpec('quadratic_position', {'kappa': -1.0}))
    f = DiscreteStatistic([[3.0], [-1.0]], [[1.0], [0.0]], [0.5, 0.5])
    np.testing.assert_allclose(acceleration(f, psi).accelerations, [[-3.0], [1.0]], atol=1e-12)


def test_non_convex_lagrangian_is_rejected():
    """Test the quartic well at rest fails the convexity precondition."""
    f = DiscreteStatistic.dirac(0.0, 0.0)
    with pytest.raises(ValidationError):
        acceleration(f, PotentialSpec('quartic_well'))
    with pytest.raises(ValidationError):
        dobrushin_solve(f, TimeGrid(1.0, 4), PotentialSpec('quartic_well'))


@pytest.mark.slow
def test_attracting_pair_matches_closed_form(approaching_pair, kinetic):
    """Test the flow against x_1 - x_2 = -cosh(sqrt2 t) + sinh(sqrt2 t) / sqrt2."""
    grid = TimeGrid(0.5, 500)
    flow = dobrushin_solve(approaching_pair, grid, kinetic, ATTRACTION)
    r = _pair_separation(grid.times)
    x = flow.positions[:, :, 0]
    assert np.abs(x[:, 0] - x[:, 1] - r).max() < 1e-6
    assert np.abs(0.5 * (x[:, 0] + x[:, 1]) - 0.5).max() < 1e-6


def test_weak_residual_is_small(approaching_pair, kinetic):
    """Test the flow solves the equation against smooth test functions."""
    flow = dobrushin_solve(approaching_pair, TimeGrid(0.5, 100), kinetic, ATTRACTION)
    assert flow.max_contraction < 0.5
    assert flow.recovery_residual < 1e-9
    assert weak_vlasov_residual(flow) < 1e-4
    assert flow.summary()['steps'] == 100


def test_momentum_is_conserved_with_velocity_interaction(kinetic):
    """Test sum_k w_k grad_v psi stays constant under flocking."""
    f0 = DiscreteStatistic([[0.0], [0.5], [1.2]], [[0.3], [-0.2], [0.1]], np.full(3, 1.0 / 3.0))
    flow = dobrushin_solve(f0, TimeGrid(0.5, 50), kinetic,
                           PotentialSpec('flocking', {'kappa': 1.0, 'c': 1.0}))
    p = total_momentum(flow)
    assert np.abs(p - p[0]).max() < 1e-8


def test_flow_statistic_bounds(approaching_pair, kinetic):
    """Test node statistics carry the initial weights and reject bad indices."""
    flow = dobrushin_solve(approaching_pair, TimeGrid(0.2, 4), kinetic, ATTRACTION)
    f = flow_statistic(flow, 4)
    np.testing.assert_array_equal(f.weights, approaching_pair.weights)
    with pytest.raises(ValidationError):
        flow_statistic(flow, 5)


def test_bump_family_is_reproducible_and_vanishes_at_the_ends(approaching_pair, kinetic):
    """Test equal seeds give equal bumps with no mass at t = 0 or t = T."""
    flow = dobrushin_solve(approaching_pair, TimeGrid(0.2, 4), kinetic, ATTRACTION)
    first, second = bump_family(flow, count=4, seed=3), bump_family(flow, count=4, seed=3)
    for a, b in zip(first, second):
        assert a.t_center == b.t_center
        np.testing.assert_array_equal(a.x_center, b.x_center)
        for t in (0.0, flow.grid.T):
            value, _, _, _ = a.evaluate(t, flow.positions[0], flow.velocities[0])
            np.testing.assert_array_equal(value, 0.0)


def test_gronwall_rate():
    """Test the fitted constant bounds the ratios tightly."""
    assert gronwall_rate(np.array([0.0, 1.0]), np.array([1.0, 2.0])) == 1.0
    rate = gronwall_rate(np.array([0.0, 1.0]), np.array([1.0, 10.0]))
    assert rate * np.exp(rate) == pytest.approx(10.0)


def _shifted(f, delta):
    return DiscreteStatistic(f.positions + delta * np.array([[1.0], [-0.5], [0.2]]),
                             f.velocities + delta * np.array([[0.3], [0.1], [-0.4]]), f.weights)


def test_fitted_rate_bounds_a_larger_perturbation(kinetic):
    """Test a rate fitted at one perturbation size still bounds a ten times larger one."""
    f0 = DiscreteStatistic([[0.0], [1.0], [2.5]], [[0.2], [-0.1], [0.0]], np.full(3, 1.0 / 3.0))
    grid = TimeGrid(0.3, 30)
    fitted = stability_experiment(f0, _shifted(f0, 1e-3), grid, kinetic, ATTRACTION)
    assert fitted.passed
    checked = stability_experiment(f0, _shifted(f0, 1e-2), grid, kinetic, ATTRACTION,
                                   rate=fitted.rate * (1 + 1e-3))
    assert checked.passed
    assert checked.to_dict()['rate'] == pytest.approx(fitted.rate * (1 + 1e-3))


def test_stability_with_identical_data(approaching_pair, kinetic):
    """Test equal initial data gives unit ratios."""
    report = stability_experiment(approaching_pair, approaching_pair, TimeGrid(0.2, 4), kinetic)
    np.testing.assert_array_equal(report.ratios, 1.0)
    assert report.passed


def test_stability_needs_matching_sizes(approaching_pair, kinetic):
    """Test atom counts must agree."""
    with pytest.raises(ValidationError):
        stability_experiment(approaching_pair, DiscreteStatistic.dirac(0.0, 0.0),
                             TimeGrid(0.2, 4), kinetic)
