"""Test suite for the potential catalog and audits."""
import numpy as np
import pytest

from mean_field_action import DiscreteStatistic, MeanFieldLagrangian, PotentialSpec, ValidationError
from mean_field_action.action import phi
from mean_field_action.potentials import (KIND_DEFAULTS, audit_growth, check_symmetry, combine,
                                          is_pair_convex, pair_form, pairwise_psi2)

SMOOTH_SPECS = [
    PotentialSpec('quadratic_kinetic', {'scale': 0.7}),
    PotentialSpec('velocity_quadratic', {'alpha': -0.3}),
    PotentialSpec('quadratic_position', {'kappa': 2.0}),
    PotentialSpec('gaussian_congestion', {'amplitude': 1.5}),
    PotentialSpec('flocking', {'kappa': 2.0, 'c': 3.0}),
    PotentialSpec('quartic_well'),
    PotentialSpec('variance_penalty', {'confinement': 0.5}),
    PotentialSpec('custom', {'terms': [{'coef': 0.3, 'x_powers': [1, 0], 'v_powers': [1, 2],
                                        'x_decay': 0.5}]}),
]


def _finite_difference_gradient(spec, z, h=1e-6):
    grad = np.zeros_like(z)
    for i in range(z.shape[1]):
        step = np.zeros(z.shape[1])
        step[i] = h
        grad[:, i] = (spec.value_z(z + step) - spec.value_z(z - step)) / (2 * h)
    return grad


def _finite_difference_hessian(spec, z, h=1e-5):
    D = z.shape[1]
    hess = np.zeros((z.shape[0], D, D))
    for i in range(D):
        step = np.zeros(D)
        step[i] = h
        hess[:, :, i] = (spec.grad_z(z + step) - spec.grad_z(z - step)) / (2 * h)
    return hess


def test_catalog_values():
    """Test closed-form values of the catalog kinds."""
    assert PotentialSpec('quadratic_kinetic').value(0.0, 2.0) == pytest.approx(2.0)
    assert PotentialSpec('quadratic_position', {'kappa': 3.0}).value(2.0, 5.0) == pytest.approx(12.0)
    assert (PotentialSpec('flocking', {'kappa': 2.0, 'c': 3.0}).value(0.5, 1.0)
            == pytest.approx(2.0 * (1.0 - 3.0) * np.exp(-0.25)))
    assert PotentialSpec('quartic_well').value(0.0, 0.0) == pytest.approx(0.25)
    assert PotentialSpec('two_well').value(0.0, 0.5) == pytest.approx(0.5)
    assert PotentialSpec('two_well_interaction').value(0.0, 3.0) == pytest.approx(2.0)


def test_two_well_reports_right_limit_slopes():
    """Test the derivative at kinks is the right limit."""
    spec = PotentialSpec('two_well')
    _, slope_mid = spec.grad(0.0, 0.0)
    _, slope_well = spec.grad(0.0, 1.0)
    assert slope_mid[0] == -1.0
    assert slope_well[0] == 1.0


@pytest.mark.parametrize("spec", SMOOTH_SPECS, ids=lambda s: s.kind)
def test_gradients_match_finite_differences(spec, rng):
    """Test analytic gradients and Hessians of smooth kinds."""
    z = rng.uniform(-1.5, 1.5, size=(12, 4))
    np.testing.assert_allclose(spec.grad_z(z), _finite_difference_gradient(spec, z),
                               rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(spec.hess_z(z), _finite_difference_hessian(spec, z),
                               rtol=1e-5, atol=1e-6)


def test_unknown_kind_and_parameters_are_rejected():
    """Test catalog validation."""
    with pytest.raises(ValidationError):
        PotentialSpec('harmonic')
    with pytest.raises(ValidationError):
        PotentialSpec('flocking', {'sigma': 1.0})


def test_from_config_variants():
    """Test mapping, bare name, None and spec entries."""
    assert PotentialSpec.from_config(None).is_zero()
    assert PotentialSpec.from_config('quartic_well').kind == 'quartic_well'
    spec = PotentialSpec.from_config({'name': 'flocking', 'params': {'kappa': 1, 'c': 1}})
    assert spec.params == {'kappa': 1.0, 'c': 1.0}
    assert PotentialSpec.from_config(spec) is spec
    with pytest.raises(ValidationError):
        PotentialSpec.from_config({'params': {}})


def test_to_config_round_trips_sums():
    """Test nested sums survive to_config and from_config."""
    spec = combine(PotentialSpec('quadratic_kinetic'), PotentialSpec('quadratic_position'))
    rebuilt = PotentialSpec.from_config(spec.to_config())
    z = np.array([[0.3, -1.2], [1.0, 2.0]])
    np.testing.assert_allclose(rebuilt.value_z(z), spec.value_z(z))


def test_defaults_cover_every_kind():
    """Test every catalog kind builds with its defaults."""
    for kind in KIND_DEFAULTS:
        PotentialSpec(kind)


def test_well_kinds_are_one_dimensional():
    """Test two-well kinds reject d > 1."""
    with pytest.raises(ValidationError):
        PotentialSpec('two_well').check_dim(2)


def test_pair_form_rewrites_variance_penalty():
    """Test variance_penalty becomes a quartic psi with |v|^2 interaction."""
    psi, U = pair_form(PotentialSpec('variance_penalty', {'confinement': 2.0}), None)
    z = np.array([[1.0, 0.5]])
    assert psi.value_z(z)[0] == pytest.approx(0.25 * (0.25 - 1.0) ** 2 + 2.0)
    assert U.value_z(z)[0] == pytest.approx(0.25)
    with pytest.raises(ValidationError):
        pair_form(PotentialSpec('quadratic_kinetic'), PotentialSpec('variance_penalty'))


def test_variance_penalty_phi():
    """Test Phi vanishes on unit speed and charges the variance of a split."""
    spec = PotentialSpec('variance_penalty')
    assert phi(spec, None, DiscreteStatistic.dirac(0.0, 1.0)) == pytest.approx(0.0)
    split = DiscreteStatistic([[0.0], [0.0]], [[1.0], [-1.0]], [0.5, 0.5])
    assert phi(spec, None, split) == pytest.approx(1.0)


def test_mean_field_lagrangian_adds_interaction():
    """Test L[f] = psi + sum_k w_k U(. - z_k)."""
    f = DiscreteStatistic([[0.0], [1.0]], [[0.0], [0.0]], [0.5, 0.5])
    lag = MeanFieldLagrangian(PotentialSpec('quadratic_kinetic'),
                              PotentialSpec('quadratic_position', {'kappa': 1.0}), f)
    assert lag.value(0.0, 2.0) == pytest.approx(2.0 + 0.5 * 0.0 + 0.5 * 1.0)
    gx, gv = lag.grad(0.0, 2.0)
    assert gx[0] == pytest.approx(0.5 * 2.0 * (0.0 - 1.0))
    assert gv[0] == pytest.approx(2.0)


def test_pairwise_psi2_is_symmetric_for_even_interactions():
    """Test psi_2(z, z') = psi_2(z', z) for an even U."""
    psi, U = PotentialSpec('quadratic_kinetic'), PotentialSpec('flocking', {'kappa': 1.0, 'c': 1.0})
    a = pairwise_psi2(psi, U, 0.2, 1.0, -0.4, 0.3)
    b = pairwise_psi2(psi, U, -0.4, 0.3, 0.2, 1.0)
    assert a == pytest.approx(b)


def test_check_symmetry():
    """Test even kinds pass and an odd custom term is flagged."""
    assert check_symmetry(PotentialSpec('flocking'), 2) == pytest.approx(0.0, abs=1e-12)
    odd = PotentialSpec('custom', {'terms': [{'coef': 1.0, 'x_powers': [1], 'v_powers': [0]}]})
    assert check_symmetry(odd, 1) > 1.0


def test_audit_passes_for_quadratic_kinetic():
    """Test 1/2 |v|^2 is coercive with c = 1/4 and C = 0."""
    audit = audit_growth(PotentialSpec('quadratic_kinetic'), None, samples=64)
    assert audit.passed
    assert audit.c == pytest.approx(0.25, rel=1e-9)
    assert audit.C == pytest.approx(0.0, abs=1e-12)
    assert audit.psi2_convex
    assert audit.witness is None


def test_audit_fails_without_velocity_growth():
    """Test a confinement-only Phi fails with a witness."""
    audit = audit_growth(PotentialSpec('zero'), PotentialSpec('quadratic_position'), samples=32)
    assert not audit.passed
    assert audit.witness is not None
    assert audit.notes


@pytest.mark.parametrize("alpha, passed", [(-1.0, False), (-0.5, True)])
def test_audit_with_negative_velocity_interaction(alpha, passed):
    """Test |v|^2 + alpha |v - v'|^2 loses coercivity at alpha = -1."""
    audit = audit_growth(PotentialSpec('quadratic_kinetic', {'scale': 1.0}),
                         PotentialSpec('velocity_quadratic', {'alpha': alpha}), samples=64)
    assert audit.passed is passed


def test_pair_convexity():
    """Test convex and non-convex kinetic terms."""
    assert is_pair_convex(PotentialSpec('quadratic_kinetic'), None)
    assert not is_pair_convex(PotentialSpec('quartic_well'), None)
    assert not is_pair_convex(PotentialSpec('two_well'), None)
