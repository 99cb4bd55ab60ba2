"""Test suite for N-body action minimization."""
import numpy as np
import pytest

from mean_field_action import (EndpointCoupling, NumericalError, OptimizeOptions, PathEnsemble,
                               PotentialSpec, TimeGrid, ValidationError, convergence_experiment,
                               optimize)
from mean_field_action.core import straight_line_ensemble
from mean_field_action.nbody import (CROSSING_GROUPS, comparison_pairs, crossing_coupling,
                                     exchange_coupling, group_alignment, integrated_w2_squared,
                                     make_sampler, mean_pairwise_distance, momentum,
                                     straight_line_action)

KAPPA = 50.0


def _two_particle_closed_form(t):
    """Particle 1 for 0 -> 0 and particle 2 for 1 -> 1 under kappa |x|^2 attraction."""
    x1 = 0.5 - np.cosh(10.0 * (t - 0.5)) / (2.0 * np.cosh(5.0))
    return x1, 1.0 - x1


def _two_particle_error(steps, opts=None):
    coupling = EndpointCoupling.uniform([[0.0], [1.0]], [[0.0], [1.0]])
    grid = TimeGrid(1.0, steps)
    report = optimize(coupling, grid, PotentialSpec('quadratic_kinetic'),
                      PotentialSpec('quadratic_position', {'kappa': KAPPA}), opts)
    x1, x2 = _two_particle_closed_form(grid.times)
    nodes = report.ensemble.nodes[:, :, 0]
    return max(np.abs(nodes[0] - x1).max(), np.abs(nodes[1] - x2).max()), report


def test_two_particle_closed_form():
    """Test the minimizer tracks the hyperbolic-cosine solution."""
    error, report = _two_particle_error(200)
    assert report.converged
    assert error < 1e-3
    assert report.el_residual < 1e-2
    assert report.final_action < report.initial_action


@pytest.mark.slow
def test_two_particle_error_decreases_under_refinement():
    """Test doubling M reduces the distance to the closed form."""
    opts = OptimizeOptions(gtol=1e-12)
    coarse, _ = _two_particle_error(200, opts)
    fine, report = _two_particle_error(400, opts)
    assert fine < coarse
    assert report.el_residual < 1e-2


def test_endpoints_are_preserved_exactly():
    """Test endpoint nodes are bit-identical to the coupling."""
    coupling = EndpointCoupling.uniform([[0.1], [0.9]], [[0.3], [0.7]])
    report = optimize(coupling, TimeGrid(1.0, 12), PotentialSpec('quadratic_kinetic'),
                      PotentialSpec('gaussian_congestion'))
    np.testing.assert_array_equal(report.ensemble.nodes[:, 0], coupling.starts)
    np.testing.assert_array_equal(report.ensemble.nodes[:, -1], coupling.ends)


def test_free_particles_stay_on_straight_lines(kinetic):
    """Test U = 0 leaves the straight-line initialization optimal."""
    coupling = EndpointCoupling.uniform([[0.0], [1.0]], [[2.0], [-1.0]])
    grid = TimeGrid(1.0, 10)
    report = optimize(coupling, grid, kinetic)
    assert report.final_action == pytest.approx(straight_line_action(coupling, grid, kinetic))
    assert report.final_action == pytest.approx(0.5 * (0.5 * 4.0 + 0.5 * 4.0))
    assert report.converged


def test_action_history_is_monotone():
    """Test accepted iterates never increase the action."""
    coupling = EndpointCoupling.uniform([[0.0], [1.0]], [[0.0], [1.0]])
    report = optimize(coupling, TimeGrid(1.0, 40), PotentialSpec('quadratic_kinetic'),
                      PotentialSpec('quadratic_position', {'kappa': 10.0}))
    history = np.array(report.action_history)
    assert history[0] == report.initial_action
    assert np.all(np.diff(history) <= 1e-12)


def test_total_momentum_is_nearly_conserved(kinetic):
    """Test sum_k w_k v_k drifts no more than the Euler-Lagrange residual allows."""
    grid = TimeGrid(1.0, 20)
    report = optimize(crossing_coupling(), grid, kinetic,
                      PotentialSpec('flocking', {'kappa': 1.0, 'c': 1.0}))
    p = momentum(report.ensemble, kinetic)
    drift = float(np.abs(p - p[0]).max())
    assert drift <= 10.0 * report.el_residual * grid.T + 1e-12


def test_single_step_grid_is_rejected(kinetic):
    """Test M = 1 leaves nothing to optimize."""
    coupling = EndpointCoupling.uniform([[0.0]], [[1.0]])
    with pytest.raises(ValidationError):
        optimize(coupling, TimeGrid(1.0, 1), kinetic)


def test_non_convex_lagrangian_is_rejected():
    """Test the quartic well at rest fails the strict convexity check."""
    coupling = EndpointCoupling.uniform([[0.0]], [[0.0]])
    with pytest.raises(ValidationError):
        optimize(coupling, TimeGrid(1.0, 4), PotentialSpec('quartic_well'))


def test_non_smooth_kinds_are_rejected():
    """Test the optimizer refuses piecewise-linear kinds."""
    coupling = EndpointCoupling.uniform([[0.0]], [[1.0]])
    with pytest.raises(ValidationError):
        optimize(coupling, TimeGrid(1.0, 4), PotentialSpec('two_well'))


def test_raise_on_failure():
    """Test an iteration cap below convergence raises when requested."""
    coupling = EndpointCoupling.uniform([[0.0], [1.0]], [[0.0], [1.0]])
    opts = OptimizeOptions(max_iter=1, raise_on_failure=True)
    with pytest.raises(NumericalError) as excinfo:
        optimize(coupling, TimeGrid(1.0, 50), PotentialSpec('quadratic_kinetic'),
                 PotentialSpec('quadratic_position', {'kappa': KAPPA}), opts)
    assert 'best_action' in excinfo.value.details


def test_unconverged_report_without_raising():
    """Test the default keeps the best iterate and flags it."""
    coupling = EndpointCoupling.uniform([[0.0], [1.0]], [[0.0], [1.0]])
    report = optimize(coupling, TimeGrid(1.0, 50), PotentialSpec('quadratic_kinetic'),
                      PotentialSpec('quadratic_position', {'kappa': KAPPA}),
                      OptimizeOptions(max_iter=1))
    assert not report.converged
    assert report.to_dict()['converged'] is False


def test_options_from_config():
    """Test known keys are accepted and unknown keys raise."""
    assert OptimizeOptions.from_config({'gtol': 1e-6}).gtol == 1e-6
    assert OptimizeOptions.from_config(None) == OptimizeOptions()
    with pytest.raises(ValidationError):
        OptimizeOptions.from_config({'tolerance': 1e-6})


def test_samplers():
    """Test point, stratified and gaussian endpoint samplers."""
    rng = np.random.default_rng(0)
    starts, ends = make_sampler('point', {'start': 1.0, 'end': 2.0})(rng, 3)
    np.testing.assert_array_equal(starts, [[1.0]] * 3)
    np.testing.assert_array_equal(ends, [[2.0]] * 3)
    starts, ends = make_sampler('uniform_shift', {'shift': 0.5})(rng, 4)
    np.testing.assert_allclose(starts[:, 0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(ends - starts, 0.5)
    starts, ends = make_sampler('gaussian', {'dim': 2})(rng, 5)
    assert starts.shape == ends.shape == (5, 2)
    with pytest.raises(ValidationError):
        make_sampler('cauchy')


def test_integrated_distance_between_ensembles():
    """Test the integrated W_2^2 vanishes on equal ensembles and needs one grid."""
    grid = TimeGrid(1.0, 4)
    ens = PathEnsemble(grid, np.linspace(0.0, 1.0, 5)[None, :], [1.0])
    shifted = ens.with_nodes(ens.nodes + 1.0)
    assert integrated_w2_squared(ens, ens) == pytest.approx(0.0, abs=1e-12)
    assert integrated_w2_squared(ens, shifted) == pytest.approx(1.0)
    other = PathEnsemble(TimeGrid(1.0, 2), np.zeros((1, 3)), [1.0])
    with pytest.raises(ValidationError):
        integrated_w2_squared(ens, other)


def test_convergence_results_do_not_depend_on_job_order():
    """Test a runner executing jobs in reverse gives the same table."""
    def reverse_runner(jobs):
        return list(reversed([job() for job in reversed(jobs)]))

    sampler = make_sampler('uniform_shift', {'stratified': False})
    kwargs = dict(grid=TimeGrid(1.0, 5), spec_psi=PotentialSpec('quadratic_kinetic'),
                  spec_U=PotentialSpec('gaussian_congestion'), seed=11)
    forward = convergence_experiment(sampler, [2, 4], **kwargs)
    backward = convergence_experiment(sampler, [2, 4], runner=reverse_runner, **kwargs)
    assert forward.distances == backward.distances
    assert len(forward.to_dict()['optimizations']) == 2


def test_comparison_pairs():
    """Test N is compared with 4N and neighbours are the fallback."""
    assert comparison_pairs([2, 4, 8, 16]) == [(2, 8), (4, 16)]
    assert comparison_pairs([4, 8, 16, 32], 'successive') == [(4, 8), (8, 16), (16, 32)]
    assert comparison_pairs([2, 4]) == [(2, 4)]
    with pytest.raises(ValidationError):
        comparison_pairs([2, 8], 'cauchy')


def test_convergence_needs_two_counts():
    """Test a single particle count is rejected."""
    with pytest.raises(ValidationError):
        convergence_experiment(make_sampler('point'), [4], TimeGrid(1.0, 5),
                               PotentialSpec('quadratic_kinetic'))


@pytest.mark.slow
def test_convergence_distances_decrease():
    """Test successive minimizers move closer as N doubles."""
    table = convergence_experiment(make_sampler('uniform_shift'), [4, 8, 16, 32],
                                   TimeGrid(1.0, 20), PotentialSpec('quadratic_kinetic'),
                                   PotentialSpec('gaussian_congestion'),
                                   pairing='successive')
    assert table.monotone
    assert len(table.distances) == 3


@pytest.mark.slow
def test_quadrupled_minimizers_move_closer():
    """Test N against 4N distances shrink as N doubles."""
    table = convergence_experiment(make_sampler('uniform_shift'), [2, 4, 8, 16],
                                   TimeGrid(1.0, 20), PotentialSpec('quadratic_kinetic'),
                                   PotentialSpec('gaussian_congestion'))
    assert table.pairs == [(2, 8), (4, 16)]
    assert table.monotone


def test_pairwise_distance_and_alignment():
    """Test helper statistics on hand-built paths."""
    grid = TimeGrid(1.0, 2)
    nodes = np.array([
        [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
        [[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]],
        [[0.0, 0.0], [0.0, 1.0], [0.0, 2.0]],
        [[1.0, 0.0], [1.0, -1.0], [1.0, -2.0]],
    ])
    ens = PathEnsemble(grid, nodes, np.full(4, 0.25))
    distances = mean_pairwise_distance(ens)
    assert distances.shape == (3,)
    assert group_alignment(ens, CROSSING_GROUPS, 0) == pytest.approx(0.0)
    assert group_alignment(ens, [(0, 1)], 1) == pytest.approx(1.0)
    assert group_alignment(ens, [(2, 3)], 0) == pytest.approx(-1.0)


@pytest.mark.slow
@pytest.mark.parametrize("coupling_factory", [crossing_coupling, exchange_coupling])
def test_crossing_configurations_descend(coupling_factory):
    """Test the four-particle flocking runs lower the action."""
    report = optimize(coupling_factory(), TimeGrid(1.0, 40), PotentialSpec('quadratic_kinetic'),
                      PotentialSpec('flocking'))
    assert report.final_action < report.initial_action
    assert np.all(np.isfinite(report.ensemble.nodes))


@pytest.mark.slow
def test_confined_crossing_pulls_particles_together():
    """Test 50|x|^2 bends the crossing paths below the straight-line action and spacing."""
    grid, coupling = TimeGrid(1.0, 40), crossing_coupling()
    psi, U = PotentialSpec('quadratic_kinetic'), PotentialSpec('quadratic_position', {'kappa': KAPPA})
    report = optimize(coupling, grid, psi, U)
    assert report.final_action < straight_line_action(coupling, grid, psi, U)
    straight = straight_line_ensemble(coupling, grid)
    assert mean_pairwise_distance(report.ensemble).min() < mean_pairwise_distance(straight).min()


@pytest.mark.slow
def test_flocking_exchange_raises_group_alignment():
    """Test head-on group members leave their shared line and align better mid-horizon."""
    grid, coupling = TimeGrid(1.0, 40), exchange_coupling()
    report = optimize(coupling, grid, PotentialSpec('quadratic_kinetic'), PotentialSpec('flocking'))
    mid = grid.steps // 2
    baseline = group_alignment(straight_line_ensemble(coupling, grid), CROSSING_GROUPS, mid)
    assert baseline == pytest.approx(-1.0)
    assert group_alignment(report.ensemble, CROSSING_GROUPS, mid) > baseline
