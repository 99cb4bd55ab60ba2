"""Test suite for one-dimensional Eulerian transport and the HJB check."""
import numpy as np
import pytest

from mean_field_action import (DiscreteStatistic, EulerianField1D, NumericalError, PathEnsemble,
                               PotentialSpec, SpaceGrid, TimeGrid, ValidationError, hjb_residual,
                               solve_free_endpoint)
from mean_field_action.potentials import MeanFieldLagrangian, combine
from mean_field_action.ot_hjb import (continuity_residual, eulerian_action, eulerian_collapse,
                                      field_from_ensemble_pairing, field_statistic,
                                      legendre_biconjugate, legendre_transform, perturb_velocity)

SPACE = SpaceGrid(-1.0, 4.0, 50)


def _uniform_masses(space, low, high):
    """Unit mass spread evenly over the cells with centres in [low, high]."""
    inside = (space.centers > low) & (space.centers < high)
    return inside / inside.sum()


def _uniform_field(steps=4, cells=10, velocity=1.0):
    grid, space = TimeGrid(1.0, steps), SpaceGrid(0.0, 1.0, cells)
    return EulerianField1D(grid, space, np.full((steps, cells), 1.0 / cells),
                           np.full((steps, cells), velocity))


def test_space_grid():
    """Test widths, centres, location and validation."""
    space = SpaceGrid(0.0, 2.0, 4)
    assert space.width == 0.5
    np.testing.assert_allclose(space.centers, [0.25, 0.75, 1.25, 1.75])
    np.testing.assert_array_equal(space.locate([0.0, 0.6, 2.0]), [0, 1, 3])
    with pytest.raises(ValidationError):
        space.locate([2.5])
    with pytest.raises(ValidationError):
        SpaceGrid(1.0, 1.0, 4)


def test_field_validation():
    """Test shapes, signs and slice sums."""
    grid, space = TimeGrid(1.0, 2), SpaceGrid(0.0, 1.0, 2)
    with pytest.raises(ValidationError):
        EulerianField1D(grid, space, np.full((2, 3), 1.0 / 3), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        EulerianField1D(grid, space, np.array([[1.5, -0.5], [0.5, 0.5]]), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        EulerianField1D(grid, space, np.array([[0.5, 0.4], [0.5, 0.5]]), np.zeros((2, 2)))


def test_collapse_bins_mass_and_mean_velocity():
    """Test binned masses and conditional mean velocities."""
    grid = TimeGrid(1.0, 2)
    ens = PathEnsemble(grid, np.array([[0.25, 0.75, 1.25], [0.3, 1.3, 1.8]]), [0.5, 0.5])
    fld = eulerian_collapse(ens, SpaceGrid(0.0, 2.0, 2))
    np.testing.assert_allclose(fld.rho, [[1.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(fld.velocity, [[1.5, 0.0], [1.0, 1.0]])
    f = field_statistic(fld, 0)
    assert f.size == 1
    np.testing.assert_allclose(f.positions, [[0.5]])


def test_collapse_is_one_dimensional(unit_grid):
    """Test planar ensembles are rejected."""
    ens = PathEnsemble(unit_grid, np.zeros((1, 11, 2)), [1.0])
    with pytest.raises(ValidationError):
        eulerian_collapse(ens, SpaceGrid(-1.0, 1.0, 4))


def test_uniform_translation_has_no_continuity_defect():
    """Test constant density and velocity satisfy the continuity equation."""
    assert continuity_residual(_uniform_field()) == pytest.approx(0.0, abs=1e-12)


def test_eulerian_action_of_unit_flow(kinetic):
    """Test V = 1 with psi = 1/2 v^2 gives T / 2."""
    assert eulerian_action(_uniform_field(), kinetic) == pytest.approx(0.5)


def test_eulerian_action_rejects_non_convex_pairs():
    """Test a quartic well is sent to the relaxation module."""
    with pytest.raises(ValidationError, match="relaxation"):
        eulerian_action(_uniform_field(), PotentialSpec('quartic_well'))


def test_perturbation_keeps_density():
    """Test velocity perturbations leave rho unchanged."""
    fld = _uniform_field()
    perturbed = perturb_velocity(fld, 0.5)
    np.testing.assert_array_equal(perturbed.rho, fld.rho)
    assert np.abs(perturbed.velocity - fld.velocity).max() == pytest.approx(0.5, rel=0.05)


def test_legendre_transform_of_kinetic_energy(kinetic):
    """Test L* = p^2 / 2 and v* = p for L = v^2 / 2."""
    lag = MeanFieldLagrangian(kinetic, None, DiscreteStatistic.dirac(0.0, 0.0))
    conjugate, v = legendre_transform(lag, [0.0, 0.0], [2.0, -1.0])
    np.testing.assert_allclose(conjugate, [2.0, 0.5])
    np.testing.assert_allclose(v, [2.0, -1.0])


def test_biconjugate_of_convex_lagrangian():
    """Test L** = L for the convex 1/2 v^2 + 1/4 v^4."""
    quartic = PotentialSpec('custom', {'terms': [{'coef': 0.25, 'x_powers': [0],
                                                  'v_powers': [4]}]})
    psi = combine(PotentialSpec('quadratic_kinetic'), quartic)
    lag = MeanFieldLagrangian(psi, None, DiscreteStatistic.dirac(0.0, 0.0))
    v = np.array([0.5, -1.0, 2.0])
    expected = 0.5 * v ** 2 + 0.25 * v ** 4
    np.testing.assert_allclose(legendre_biconjugate(lag, np.zeros(3), v), expected, rtol=1e-9)


def test_legendre_transform_needs_convexity():
    """Test the quartic well at rest has no Legendre inversion."""
    lag = MeanFieldLagrangian(PotentialSpec('quartic_well'), None, DiscreteStatistic.dirac(0.0, 0.0))
    with pytest.raises(NumericalError):
        legendre_transform(lag, [0.0], [0.1])


def test_free_endpoint_prefers_the_monotone_pairing(kinetic):
    """Test quantized marginals and the monotone optimal pairing."""
    result = solve_free_endpoint(_uniform_masses(SPACE, 0.0, 1.0), _uniform_masses(SPACE, 1.0, 3.0),
                                 SPACE, TimeGrid(1.0, 10), kinetic, particles=3)
    np.testing.assert_allclose(result.starts, [1 / 6, 1 / 2, 5 / 6], atol=1e-9)
    np.testing.assert_allclose(result.ends, [4 / 3, 2.0, 8 / 3], atol=1e-9)
    assert result.pairing == (0, 1, 2)
    assert result.evaluated == 6
    assert result.action == min(result.candidates.values())
    np.testing.assert_allclose(result.field.rho.sum(axis=1), 1.0)
    assert result.to_dict()['pairing'] == [0, 1, 2]


def test_field_from_pairing(kinetic):
    """Test one pairing is optimized and collapsed."""
    report, fld = field_from_ensemble_pairing(np.array([0.0, 1.0]), np.array([2.0, 3.0]), (1, 0),
                                              TimeGrid(1.0, 4), SPACE, kinetic)
    assert report.final_action == pytest.approx(0.5 * (0.5 * 9.0 + 0.5 * 1.0))
    assert fld.rho.shape == (4, SPACE.cells)


def test_free_endpoint_validation(kinetic):
    """Test particle limits and marginal shapes."""
    masses = _uniform_masses(SPACE, 0.0, 1.0)
    with pytest.raises(ValidationError):
        solve_free_endpoint(masses, masses, SPACE, TimeGrid(1.0, 4), kinetic, particles=11)
    with pytest.raises(ValidationError):
        solve_free_endpoint(masses[:-1], masses, SPACE, TimeGrid(1.0, 4), kinetic)


def test_hjb_needs_three_slices(kinetic):
    """Test a centred time difference needs interior slices."""
    with pytest.raises(ValidationError):
        hjb_residual(_uniform_field(steps=2), kinetic)


def test_hjb_holds_for_uniform_translation(kinetic):
    """Test a constant velocity field has constant residual on every slice."""
    report = hjb_residual(_uniform_field(steps=4), kinetic)
    assert report.max_deviation == pytest.approx(0.0, abs=1e-12)
    assert report.evaluated_slices == [1, 2]
    np.testing.assert_allclose(report.constants[1:3], 0.5)


def _transport_field(steps, cells):
    """
    Free transport of uniform [0, 1] onto uniform [1, 3] over T = 1: mass is
    uniform on [t, 1 + 2t] and V(t, x) = (1 + x) / (1 + t).
    """
    grid, space = TimeGrid(1.0, steps), SpaceGrid(-1.0, 4.0, cells)
    edges = space.a + space.width * np.arange(cells + 1)
    rho = np.zeros((steps, cells))
    velocity = np.zeros((steps, cells))
    for i, t in enumerate(grid.times[:-1]):
        overlap = np.clip(np.minimum(edges[1:], 1 + 2 * t) - np.maximum(edges[:-1], t), 0.0, None)
        rho[i] = overlap / overlap.sum()
        velocity[i] = (1 + space.centers) / (1 + t)
    return EulerianField1D(grid, space, rho, velocity)


def test_hjb_deviation_shrinks_under_refinement(kinetic):
    """Test the transport field's residual shrinks as M doubles."""
    coarse = hjb_residual(_transport_field(8, 50), kinetic)
    fine = hjb_residual(_transport_field(16, 100), kinetic)
    assert coarse.evaluated_slices == list(range(1, 7))
    assert fine.max_deviation < 0.65 * coarse.max_deviation


@pytest.mark.parametrize("steps", [8, 16])
def test_perturbed_velocity_breaks_hjb(kinetic, steps):
    """Test a sine perturbation of V gives a larger deviation than the transport field."""
    fld = _transport_field(steps, 50)
    optimal = hjb_residual(fld, kinetic).max_deviation
    perturbed = hjb_residual(perturb_velocity(fld, 0.5), kinetic).max_deviation
    assert perturbed > 10 * optimal


def test_hjb_reports_each_support_component(kinetic):
    """Test two separated blobs are checked separately with their own constants."""
    grid, space = TimeGrid(1.0, 4), SpaceGrid(0.0, 1.0, 10)
    rho = np.zeros((4, 10))
    velocity = np.zeros((4, 10))
    rho[:, [1, 2, 6, 7]] = 0.25
    velocity[:, [1, 2]] = 1.0
    velocity[:, [6, 7]] = 2.0
    report = hjb_residual(EulerianField1D(grid, space, rho, velocity), kinetic)
    np.testing.assert_array_equal(report.components, [0, 2, 2, 0])
    assert report.evaluated_slices == [1, 2]
    assert np.isnan(report.constants).all()
    assert report.max_deviation == pytest.approx(0.0, abs=1e-12)
    blobs = [(c.slice, c.first_cell, c.last_cell) for c in report.component_reports]
    assert blobs == [(1, 1, 2), (1, 6, 7), (2, 1, 2), (2, 6, 7)]
    np.testing.assert_allclose([c.constant for c in report.component_reports], [0.5, 2.0, 0.5, 2.0])
    assert np.isnan(report.residual[1, 3:6]).all()


def test_hjb_without_overlapping_support(kinetic):
    """Test a support that moves a full cell per slice leaves nothing to check."""
    grid, space = TimeGrid(1.0, 4), SpaceGrid(0.0, 1.0, 8)
    rho = np.zeros((4, 8))
    rho[np.arange(4), 2 * np.arange(4)] = 1.0
    report = hjb_residual(EulerianField1D(grid, space, rho, np.ones((4, 8))), kinetic)
    assert report.evaluated_slices == []
    assert report.max_deviation == 0.0
    assert report.component_reports == []
