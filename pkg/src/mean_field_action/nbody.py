#!/usr/bin/env python3
"""
N-body action minimization with fixed endpoint coupling

Interior path nodes are optimized by limited-memory quasi-Newton descent
(scipy's L-BFGS-B) from straight lines between the coupled endpoints. Also
provides the discrete Euler-Lagrange residual, the self-convergence study over
growing particle counts, and the four-particle crossing configurations.
"""

import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.optimize import minimize

from .action import (action, lagrangian_gradients, nodes_action_and_gradient,
                     phase_points, smooth_pair)
from .core import (EndpointCoupling, NumericalError, PathEnsemble, TimeGrid, ValidationError,
                   empirical_coupling, make_rng, statistic_at_interval, straight_line_ensemble)
from .potentials import PotentialSpec
from .wasserstein import wp

logger = structlog.get_logger(__name__)

Sampler = Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]
Runner = Callable[[List[Callable[[], Any]]], List[Any]]


@dataclass(frozen=True)
class OptimizeOptions:
    """Quasi-Newton settings; `gtol` bounds the interior gradient's sup-norm."""
    gtol: float = 1e-8
    max_iter: int = 20000
    memory: int = 10
    ftol: float = 1e-15
    max_line_search: int = 40
    raise_on_failure: bool = False

    @classmethod
    def from_config(cls, config: Optional[Mapping[str, Any]]) -> 'OptimizeOptions':
        config = dict(config or {})
        known = set(cls.__dataclass_fields__)
        unknown = set(config) - known
        if unknown:
            raise ValidationError(f"unknown optimizer options {sorted(unknown)}")
        return cls(**config)


@dataclass
class OptimizeReport:
    """Result of one N-body minimization."""
    ensemble: PathEnsemble
    initial_action: float
    final_action: float
    iterations: int
    function_evaluations: int
    gradient_norm: float
    el_residual: float
    wall_time: float
    converged: bool
    message: str
    action_history: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'initial_action': self.initial_action,
            'final_action': self.final_action,
            'iterations': self.iterations,
            'function_evaluations': self.function_evaluations,
            'gradient_norm': self.gradient_norm,
            'el_residual': self.el_residual,
            'wall_time_seconds': self.wall_time,
            'converged': self.converged,
            'message': self.message,
        }


def _check_strict_convexity(ens: PathEnsemble, psi: PotentialSpec, U: PotentialSpec) -> float:
    """Smallest eigenvalue of grad_v grad_v L[f_i] over the ensemble's atoms."""
    z = phase_points(ens)
    N, M, D = z.shape
    d = D // 2
    h = psi.hess_z(z.reshape(-1, D)).reshape(N, M, D, D)[..., d:, d:]
    if not U.is_zero():
        diffs = (z[:, None] - z[None, :]).reshape(-1, D)
        hu = U.hess_z(diffs).reshape(N, N, M, D, D)[..., d:, d:]
        h = h + np.einsum('klimn,l->kimn', hu, ens.weights)
    return float(np.linalg.eigvalsh(h.reshape(-1, d, d)).min())


def optimize(coupling: EndpointCoupling, grid: TimeGrid, spec_psi: PotentialSpec,
             spec_U: Optional[PotentialSpec] = None,
             opts: Optional[OptimizeOptions] = None) -> OptimizeReport:
    """
    Minimize the discrete action over interior nodes with endpoints fixed.

    Args:
        coupling: Endpoint pairs and weights
        grid: Time grid with at least two steps
        spec_psi: Kinetic potential
        spec_U: Pair interaction (None for no interaction)
        opts: Optimizer settings

    Returns:
        OptimizeReport with the optimized ensemble
    """
    opts = opts or OptimizeOptions()
    if grid.steps < 2:
        raise ValidationError("optimization needs at least two time steps")
    psi, U = smooth_pair(spec_psi, spec_U, coupling.dim)
    start = time.perf_counter()
    initial = straight_line_ensemble(coupling, grid)
    curvature = _check_strict_convexity(initial, psi, U)
    if curvature <= 0:
        raise ValidationError("L[f] is not strictly convex in v at the initial ensemble",
                              {'min_eigenvalue': curvature})

    base = np.array(initial.nodes)
    shape = base[:, 1:-1, :].shape
    weights, dt = initial.weights, grid.dt
    last: Dict[str, Any] = {}

    def objective(flat: np.ndarray) -> Tuple[float, np.ndarray]:
        nodes = base.copy()
        nodes[:, 1:-1, :] = flat.reshape(shape)
        if not np.all(np.isfinite(nodes)):
            return np.inf, np.zeros_like(flat)
        value, gradient = nodes_action_and_gradient(nodes, weights, dt, psi, U)
        last['x'], last['f'] = flat.copy(), value
        return value, gradient[:, 1:-1, :].ravel()

    initial_action, initial_grad = objective(base[:, 1:-1, :].ravel())
    if not np.isfinite(initial_action):
        raise NumericalError("action is not finite at the straight-line initialization",
                             {'action': initial_action})
    history = [initial_action]

    def record(xk: np.ndarray) -> None:
        if 'x' in last and np.array_equal(xk, last['x']):
            history.append(float(last['f']))
        else:
            history.append(objective(xk)[0])

    logger.info("optimize_start", particles=coupling.size, steps=grid.steps, dim=coupling.dim,
                psi=spec_psi.kind, U=None if spec_U is None else spec_U.kind,
                initial_action=initial_action)
    result = minimize(
        objective, base[:, 1:-1, :].ravel(), jac=True, method='L-BFGS-B', callback=record,
        options={'maxcor': opts.memory, 'gtol': opts.gtol, 'ftol': opts.ftol,
                 'maxiter': opts.max_iter, 'maxfun': 20 * opts.max_iter,
                 'maxls': opts.max_line_search},
    )
    nodes = base.copy()
    nodes[:, 1:-1, :] = result.x.reshape(shape)
    nodes[:, 0, :] = coupling.starts
    nodes[:, -1, :] = coupling.ends
    if not np.all(np.isfinite(nodes)) or not np.isfinite(result.fun):
        raise NumericalError("optimizer produced a non-finite action",
                             {'best_action': float(result.fun)})
    ensemble = initial.with_nodes(nodes)
    final_action, final_grad = nodes_action_and_gradient(nodes, weights, dt, psi, U)
    gradient_norm = float(np.abs(final_grad[:, 1:-1, :]).max()) if shape[1] else 0.0
    converged = gradient_norm <= opts.gtol
    message = result.message if isinstance(result.message, str) else result.message.decode()
    report = OptimizeReport(
        ensemble=ensemble,
        initial_action=initial_action,
        final_action=final_action,
        iterations=int(result.nit),
        function_evaluations=int(result.nfev),
        gradient_norm=gradient_norm,
        el_residual=el_residual(ensemble, spec_psi, spec_U),
        wall_time=time.perf_counter() - start,
        converged=converged,
        message=message,
        action_history=history,
    )
    if not converged:
        logger.warning("optimize_not_converged", gradient_norm=gradient_norm, gtol=opts.gtol,
                       message=message, iterations=report.iterations)
        if opts.raise_on_failure:
            raise NumericalError("quasi-Newton descent stopped before reaching gtol",
                                 {'best_action': final_action, 'gradient_norm': gradient_norm,
                                  'message': message})
    logger.info("optimize_finished", final_action=final_action, iterations=report.iterations,
                gradient_norm=gradient_norm, el_residual=report.el_residual,
                wall_time=report.wall_time)
    return report


def el_residual(ens: PathEnsemble, spec_psi: PotentialSpec,
                spec_U: Optional[PotentialSpec] = None) -> float:
    """
    Largest |(grad_v L_i - grad_v L_{i-1}) / dt - grad_x L_i| over paths and
    interior nodes, with L_i = L[f_i] evaluated at the path's own phase point.
    """
    if ens.grid.steps < 2:
        return 0.0
    d = ens.dim
    g = lagrangian_gradients(ens, spec_psi, spec_U)
    gx, gv = g[..., :d], g[..., d:]
    residual = np.diff(gv, axis=1) / ens.grid.dt - gx[:, 1:, :]
    return float(np.linalg.norm(residual, axis=2).max())


def momentum(ens: PathEnsemble, spec_psi: PotentialSpec) -> np.ndarray:
    """sum_k w_k grad_v psi(x_k, v_k) on every interval, shape (M, d)."""
    z = phase_points(ens)
    N, M, D = z.shape
    gv = spec_psi.grad_z(z.reshape(-1, D)).reshape(N, M, D)[..., D // 2:]
    return np.einsum('k,kid->id', ens.weights, gv)


def mean_pairwise_distance(ens: PathEnsemble) -> np.ndarray:
    """Mean distance over particle pairs at every node, shape (M+1,)."""
    if ens.size < 2:
        return np.zeros(ens.grid.steps + 1)
    j, k = np.triu_indices(ens.size, 1)
    gaps = np.linalg.norm(ens.nodes[j] - ens.nodes[k], axis=2)
    return gaps.mean(axis=0)


def group_alignment(ens: PathEnsemble, groups: Sequence[Sequence[int]], i: int) -> float:
    """Mean cosine of the angle between velocities within each group on interval i."""
    velocities = ens.velocities[:, i, :]
    cosines = []
    for group in groups:
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                u, w = velocities[group[a]], velocities[group[b]]
                norm = np.linalg.norm(u) * np.linalg.norm(w)
                if norm > 0:
                    cosines.append(float(u @ w / norm))
    if not cosines:
        raise ValidationError("alignment needs at least one moving pair within a group")
    return float(np.mean(cosines))


CROSSING_GROUPS = ((0, 1), (2, 3))


def crossing_coupling() -> EndpointCoupling:
    """Four particles in the plane: two travel left to right, two bottom to top."""
    starts = np.array([[-1.0, 0.2], [-1.0, -0.2], [0.2, -1.0], [-0.2, -1.0]])
    ends = np.array([[1.0, 0.2], [1.0, -0.2], [0.2, 1.0], [-0.2, 1.0]])
    return EndpointCoupling.uniform(starts, ends)


def exchange_coupling() -> EndpointCoupling:
    """
    Group members travel head-on along a shared line off the origin and swap
    sides. The second group is the first turned by a quarter turn.
    """
    starts = np.array([[-1.6, 0.3], [1.6, 0.3], [-0.3, -1.6], [-0.3, 1.6]])
    ends = np.array([[0.4, 0.3], [-0.4, 0.3], [-0.3, 0.4], [-0.3, -0.4]])
    return EndpointCoupling.uniform(starts, ends)


# ---------------------------------------------------------------------------
# Self-convergence over particle counts
# ---------------------------------------------------------------------------

def make_sampler(kind: str, params: Optional[Mapping[str, Any]] = None) -> Sampler:
    """
    Endpoint samplers for the convergence study.

    - point: every pair equals (start, end)
    - uniform_shift: starts on [low, high]^d, ends = starts + shift; with
      `stratified` the j-th start sits at the middle of the j-th stratum
    - gaussian: independent normal starts and ends around the given means
    """
    params = dict(params or {})
    d = int(params.get('dim', 1))
    if kind == 'point':
        start = np.broadcast_to(np.asarray(params.get('start', 0.0), dtype=float), (d,))
        end = np.broadcast_to(np.asarray(params.get('end', 0.0), dtype=float), (d,))

        def point(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
            return np.tile(start, (n, 1)), np.tile(end, (n, 1))
        return point
    if kind == 'uniform_shift':
        low, high = float(params.get('low', 0.0)), float(params.get('high', 1.0))
        shift = np.broadcast_to(np.asarray(params.get('shift', 1.0), dtype=float), (d,))
        stratified = bool(params.get('stratified', True))

        def uniform_shift(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
            if stratified:
                u = (np.arange(n)[:, None] + 0.5) / n * np.ones((1, d))
            else:
                u = rng.uniform(size=(n, d))
            starts = low + (high - low) * u
            return starts, starts + shift
        return uniform_shift
    if kind == 'gaussian':
        mean_start = np.broadcast_to(np.asarray(params.get('start', 0.0), dtype=float), (d,))
        mean_end = np.broadcast_to(np.asarray(params.get('end', 1.0), dtype=float), (d,))
        sigma = float(params.get('sigma', 0.25))

        def gaussian(rng: np.random.Generator, n: int) -> Tuple[np.ndarray, np.ndarray]:
            noise = rng.standard_normal(size=(2, n, d))
            return mean_start + sigma * noise[0], mean_end + sigma * noise[1]
        return gaussian
    raise ValidationError(f"unknown sampler '{kind}'")


@dataclass
class ConvergenceTable:
    """Integrated W_2^2 between the statistics of paired minimizers."""
    n_values: List[int]
    pairs: List[Tuple[int, int]]
    distances: List[float]
    monotone: bool
    reports: List[OptimizeReport]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_values': self.n_values,
            'pairs': [list(p) for p in self.pairs],
            'distances': self.distances,
            'monotone_decreasing': self.monotone,
            'optimizations': [r.to_dict() for r in self.reports],
        }


def integrated_w2_squared(a: PathEnsemble, b: PathEnsemble) -> float:
    """Riemann sum of W_2^2 between interval statistics over the shared grid."""
    if a.grid != b.grid:
        raise ValidationError("ensembles must share one time grid")
    total = 0.0
    for i in range(a.grid.steps):
        distance, _ = wp(statistic_at_interval(a, i), statistic_at_interval(b, i), p=2)
        total += a.grid.dt * distance ** 2
    return total


PAIRINGS = ('quadruple', 'successive')


def comparison_pairs(n_values: Sequence[int], pairing: str = 'quadruple') -> List[Tuple[int, int]]:
    """
    Particle counts whose minimizers are compared.

    'quadruple' pairs N with 4N for every N whose 4N is also listed and falls
    back to successive counts when there is no such N. 'successive' pairs
    neighbours in list order.
    """
    if pairing not in PAIRINGS:
        raise ValidationError(f"unknown pairing '{pairing}'", {'choices': list(PAIRINGS)})
    successive = list(zip(n_values[:-1], n_values[1:]))
    if pairing == 'successive':
        return successive
    listed = set(n_values)
    quadruple = [(n, 4 * n) for n in n_values if 4 * n in listed]
    if not quadruple:
        logger.info("convergence_pairing_fallback", n_values=list(n_values))
        return successive
    return quadruple


def _sequential(jobs: List[Callable[[], Any]]) -> List[Any]:
    return [job() for job in jobs]


def convergence_experiment(sampler: Sampler, n_values: Sequence[int], grid: TimeGrid,
                           spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec] = None,
                           seed: int = 0, opts: Optional[OptimizeOptions] = None,
                           runner: Optional[Runner] = None,
                           pairing: str = 'quadruple') -> ConvergenceTable:
    """
    Optimize for each N and compare the minimizers of the pairs chosen by
    ``comparison_pairs``: N against 4N by default, neighbouring counts with
    ``pairing='successive'``.

    Each N draws its coupling from its own named stream, so results do not
    depend on the order in which the runner executes the jobs.
    """
    n_values = [int(n) for n in n_values]
    if len(n_values) < 2:
        raise ValidationError("convergence study needs at least two particle counts")
    pairs = comparison_pairs(n_values, pairing)
    runner = runner or _sequential

    def job(n: int) -> Callable[[], OptimizeReport]:
        def run() -> OptimizeReport:
            coupling = empirical_coupling(sampler, n, make_rng(seed, f"coupling:{n}"))
            return optimize(coupling, grid, spec_psi, spec_U, opts)
        return run

    reports = runner([job(n) for n in n_values])
    by_n = dict(zip(n_values, reports))
    distances = [integrated_w2_squared(by_n[a].ensemble, by_n[b].ensemble) for a, b in pairs]
    monotone = all(later < earlier for earlier, later in zip(distances[:-1], distances[1:]))
    logger.info("convergence_experiment", n_values=n_values, pairs=pairs, distances=distances,
                monotone=monotone)
    return ConvergenceTable(n_values=n_values, pairs=pairs, distances=distances,
                            monotone=monotone, reports=list(reports))


def straight_line_action(coupling: EndpointCoupling, grid: TimeGrid, spec_psi: PotentialSpec,
                         spec_U: Optional[PotentialSpec] = None) -> float:
    return action(straight_line_ensemble(coupling, grid), spec_psi, spec_U).total
