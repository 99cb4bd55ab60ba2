"""
Relaxed energy over martingale kernel mixtures

For a finite statistic f and a bounded velocity grid, every kernel pi maps f to
atom masses q over (atom, grid point) pairs and Phi(f pi) = c.q + 1/2 q^T B q.
The relaxation

    Phi^rel(f) = min sum_i lambda_i Phi(f pi_i)  s.t.  sum_i lambda_i pi_i martingale

is the lower convex envelope of pi -> Phi(f pi) taken over kernel barycentres.
It is computed by column generation: a master LP (HiGHS) mixes candidate
kernels under the martingale constraint, and Frank-Wolfe pricing on the
product of simplices proposes new kernels against the LP duals.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.optimize import linprog

from .action import phi
from .core import (DiscreteStatistic, NumericalError, PathEnsemble, TimeGrid, ValidationError,
                   VelocityKernel, apply_kernel, identity_kernel, make_rng,
                   statistic_at_interval)
from .potentials import PotentialSpec, audit_growth, pair_form

logger = structlog.get_logger(__name__)

GRID_LIMIT = 1500
PROBABILITY_FLOOR = 1e-13
HIGHS_OPTIONS = {'primal_feasibility_tolerance': 1e-10, 'dual_feasibility_tolerance': 1e-10}


@dataclass(frozen=True)
class VelocityGrid:
    """Uniform grid of `points` values per axis on [-radius, radius]."""
    radius: float
    points: int

    def __post_init__(self):
        if self.radius <= 0 or self.points < 2:
            raise ValidationError("velocity grid needs radius > 0 and at least 2 points",
                                  {'radius': self.radius, 'points': self.points})

    @property
    def spacing(self) -> float:
        return 2.0 * self.radius / (self.points - 1)

    def axis(self) -> np.ndarray:
        return np.linspace(-self.radius, self.radius, self.points)

    def nodes(self, d: int) -> np.ndarray:
        """Tensor-product grid points, shape (points**d, d)."""
        mesh = np.meshgrid(*([self.axis()] * d), indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {'radius': self.radius, 'points': self.points, 'spacing': self.spacing}


@dataclass(frozen=True)
class KernelMixture:
    """
    Mixture weights lambda_i with one velocity kernel per component, all on
    the same source statistic.
    """
    weights: np.ndarray
    kernels: Tuple[VelocityKernel, ...]

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=float)
        if weights.ndim != 1 or weights.shape[0] != len(self.kernels) or not self.kernels:
            raise ValidationError("mixture needs one weight per kernel")
        if np.any(weights < -1e-12) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValidationError("mixture weights must lie on the simplex",
                                  {'sum': float(weights.sum())})
        source = self.kernels[0].source
        for kernel in self.kernels[1:]:
            if not (np.array_equal(kernel.source.positions, source.positions)
                    and np.array_equal(kernel.source.velocities, source.velocities)):
                raise ValidationError("mixture kernels must share their source statistic")
        weights = np.clip(weights, 0.0, None)
        object.__setattr__(self, 'weights', weights / weights.sum())
        object.__setattr__(self, 'kernels', tuple(self.kernels))

    @classmethod
    def identity(cls, f: DiscreteStatistic) -> 'KernelMixture':
        return cls(np.ones(1), (identity_kernel(f),))

    @property
    def source(self) -> DiscreteStatistic:
        return self.kernels[0].source

    @property
    def components(self) -> int:
        return len(self.kernels)

    def aggregate_means(self) -> np.ndarray:
        return sum(w * k.means() for w, k in zip(self.weights, self.kernels))

    def is_martingale(self, tol: float = 1e-9) -> bool:
        gap = np.abs(self.aggregate_means() - self.source.velocities)
        return bool(np.all(gap <= tol))

    def statistics(self) -> List[DiscreteStatistic]:
        return [apply_kernel(self.source, k) for k in self.kernels]

    def value(self, spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec] = None) -> float:
        """sum_i lambda_i Phi(f pi_i)."""
        return float(sum(w * phi(spec_psi, spec_U, g)
                         for w, g in zip(self.weights, self.statistics())))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'weights': self.weights.tolist(),
            'kernels': [
                {'targets': [t.tolist() for t in k.targets],
                 'probabilities': [p.tolist() for p in k.probabilities]}
                for k in self.kernels
            ],
        }


@dataclass
class RelaxReport:
    """Result of a relaxation run; `upper` is the achieved value."""
    value: float
    phi: float
    mixture: Optional[KernelMixture]
    grid: VelocityGrid
    method: str
    lower: Optional[float] = None
    rounds: int = 0
    columns: int = 0
    converged: bool = True
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def upper(self) -> float:
        return self.value

    def to_dict(self) -> Dict[str, Any]:
        return {
            'value': self.value,
            'phi': self.phi,
            'upper': self.upper,
            'lower': self.lower,
            'method': self.method,
            'grid': self.grid.to_dict(),
            'rounds': self.rounds,
            'columns': self.columns,
            'converged': self.converged,
            'components': None if self.mixture is None else self.mixture.components,
            'mixture': None if self.mixture is None else self.mixture.to_dict(),
            'diagnostics': self.diagnostics,
        }


# ---------------------------------------------------------------------------
# Grid representation
# ---------------------------------------------------------------------------

def default_grid(f: DiscreteStatistic, spec_psi: PotentialSpec,
                 spec_U: Optional[PotentialSpec] = None, points: int = 61,
                 seed: int = 0) -> VelocityGrid:
    """
    Radius max(5 max|v|, sqrt((Phi(f) + C) / c)) with c, C from the growth audit;
    spreading velocity mass beyond that radius cannot lower the energy.
    """
    spread = float(np.abs(f.velocities).max()) if f.size else 0.0
    radius = max(5.0 * spread, 1.0)
    audit = audit_growth(spec_psi, spec_U, d=f.dim, seed=seed, samples=64)
    if audit.passed and audit.c > 0:
        coercive = float(np.sqrt(max(phi(spec_psi, spec_U, f) + audit.C, 0.0) / audit.c))
        radius = max(radius, coercive)
    else:
        logger.warning("relaxation_radius_unaudited", psi=spec_psi.kind,
                       U=None if spec_U is None else spec_U.kind)
    logger.info("relaxation_radius", radius=radius, points=points)
    return VelocityGrid(radius, points)


def _check_grid(f: DiscreteStatistic, grid: VelocityGrid) -> np.ndarray:
    nodes = grid.nodes(f.dim)
    if f.size * nodes.shape[0] > GRID_LIMIT:
        raise ValidationError("kernel grid too large",
                              {'atoms': f.size, 'grid_points': nodes.shape[0], 'limit': GRID_LIMIT})
    outside = np.abs(f.velocities).max(axis=1) > grid.radius + 1e-12
    if np.any(outside):
        raise ValidationError("infeasible grid: atom velocities outside the grid hull",
                              {'atoms': np.flatnonzero(outside).tolist(), 'radius': grid.radius})
    return nodes


def quadratic_form(f: DiscreteStatistic, grid: VelocityGrid, spec_psi: PotentialSpec,
                   spec_U: Optional[PotentialSpec] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    (c, B) with Phi(f pi) = c.q + 1/2 q^T B q, where q[k * S + s] is the mass
    that atom k sends to grid point s.
    """
    nodes = _check_grid(f, grid)
    K, S, d = f.size, nodes.shape[0], f.dim
    z = np.hstack([np.repeat(f.positions, S, axis=0), np.tile(nodes, (K, 1))])
    spec_U = spec_U if spec_U is not None else PotentialSpec('zero')
    if spec_psi.kind == 'variance_penalty':
        spec_psi.check_dim(d)
        c = spec_psi.value_z(z)
        B = -2.0 * (z[:, d:] @ z[:, d:].T)
        U = spec_U
    else:
        psi, U = pair_form(spec_psi, spec_U)
        psi.check_dim(d)
        c = psi.value_z(z)
        B = np.zeros((K * S, K * S))
    U.check_dim(d)
    if not U.is_zero():
        n = z.shape[0]
        pairs = U.value_z((z[:, None, :] - z[None, :, :]).reshape(-1, 2 * d)).reshape(n, n)
        B = B + pairs
    return c, 0.5 * (B + B.T)


def _masses(pi: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (w[:, None] * pi).ravel()


def _energy(pi: np.ndarray, w: np.ndarray, c: np.ndarray, B: np.ndarray) -> float:
    q = _masses(pi, w)
    return float(c @ q + 0.5 * q @ B @ q)


def _exact_step(slope: float, curvature: float) -> float:
    """Minimizer over [0, 1] of slope * t + 1/2 curvature * t^2 with slope < 0."""
    if curvature <= 0:
        return 1.0
    return float(min(1.0, -slope / curvature))


def _kernel_from_rows(f: DiscreteStatistic, pi: np.ndarray, nodes: np.ndarray) -> VelocityKernel:
    targets, probabilities = [], []
    for row in pi:
        keep = row > PROBABILITY_FLOOR
        targets.append(nodes[keep])
        probabilities.append(row[keep] / row[keep].sum())
    return VelocityKernel(f, tuple(targets), tuple(probabilities))


def _neighbour_split(velocities: np.ndarray, grid: VelocityGrid) -> np.ndarray:
    """Martingale kernel rows sending each velocity to the corners of its grid cell."""
    axis = grid.axis()
    K, d = velocities.shape
    G = grid.points
    rows = np.zeros((K, G ** d))
    for k, v in enumerate(velocities):
        per_axis = []
        for a in range(d):
            i = int(np.clip(np.searchsorted(axis, v[a], side='right') - 1, 0, G - 2))
            t = (v[a] - axis[i]) / (axis[i + 1] - axis[i])
            per_axis.append(((i, 1.0 - t), (i + 1, t)))
        for corner in np.ndindex(*([2] * d)):
            index, prob = 0, 1.0
            for a, side in enumerate(corner):
                j, p = per_axis[a][side]
                index = index * G + j
                prob *= p
            rows[k, index] += prob
    return rows


# ---------------------------------------------------------------------------
# Convex envelopes
# ---------------------------------------------------------------------------

def _lower_hull(points: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Indices of the lower convex hull vertices of sorted 1-D samples."""
    hull: List[int] = []
    for i in range(points.shape[0]):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = ((points[b] - points[a]) * (values[i] - values[a])
                     - (values[b] - values[a]) * (points[i] - points[a]))
            if cross > 0:
                break
            hull.pop()
        hull.append(i)
    return np.asarray(hull)


def convex_envelope_1d(points: Sequence[float], values: Sequence[float]) -> np.ndarray:
    """Lower convex envelope of the samples (points sorted increasingly)."""
    points = np.asarray(points, dtype=float)
    values = np.asarray(values, dtype=float)
    if points.ndim != 1 or points.shape != values.shape or points.size == 0:
        raise ValidationError("envelope needs matching 1-D samples")
    if np.any(np.diff(points) <= 0):
        raise ValidationError("envelope sample points must be strictly increasing")
    if not np.all(np.isfinite(values)):
        raise ValidationError("envelope samples must be finite")
    hull = _lower_hull(points, values)
    return np.interp(points, points[hull], values[hull])


def _atom_envelope(values: np.ndarray, nodes: np.ndarray,
                   v: np.ndarray) -> Tuple[float, np.ndarray]:
    """Envelope value at v and the optimal martingale row on the grid."""
    S, d = nodes.shape
    row = np.zeros(S)
    if d == 1:
        hull = _lower_hull(nodes[:, 0], values)
        xs = nodes[hull, 0]
        j = int(np.clip(np.searchsorted(xs, v[0], side='right') - 1, 0, max(len(hull) - 2, 0)))
        if len(hull) == 1:
            row[hull[0]] = 1.0
            return float(values[hull[0]]), row
        t = float(np.clip((v[0] - xs[j]) / (xs[j + 1] - xs[j]), 0.0, 1.0))
        row[hull[j]] += 1.0 - t
        row[hull[j + 1]] += t
        return float((1.0 - t) * values[hull[j]] + t * values[hull[j + 1]]), row
    result = linprog(values, A_eq=np.vstack([nodes.T, np.ones(S)]),
                     b_eq=np.concatenate([v, [1.0]]), bounds=(0, None), method='highs')
    if result.status != 0:
        raise NumericalError("envelope LP failed", {'message': result.message})
    return float(result.fun), np.clip(result.x, 0.0, None)


def relax_noninteracting(f: DiscreteStatistic, spec_psi: PotentialSpec,
                         grid: Optional[VelocityGrid] = None) -> float:
    """<f, psi**> in d = 1, with psi** the v-convex envelope on the grid."""
    if f.dim != 1:
        raise ValidationError("relax_noninteracting is one-dimensional")
    if grid is None:
        grid = VelocityGrid(max(2.0 * float(np.abs(f.velocities).max()), 2.0) + 1.0, 401)
    nodes = _check_grid(f, grid)
    total = 0.0
    for x, v, w in zip(f.positions, f.velocities, f.weights):
        z = np.hstack([np.repeat(x[None, :], nodes.shape[0], axis=0), nodes])
        envelope = convex_envelope_1d(nodes[:, 0], spec_psi.value_z(z))
        total += w * float(np.interp(v[0], nodes[:, 0], envelope))
    return float(total)


def _relax_by_envelope(f: DiscreteStatistic, spec_psi: PotentialSpec, spec_U: PotentialSpec,
                       grid: VelocityGrid, nodes: np.ndarray) -> RelaxReport:
    """Exact grid optimum when the interaction ignores velocities."""
    rows, kinetic = [], 0.0
    for x, v, w in zip(f.positions, f.velocities, f.weights):
        z = np.hstack([np.repeat(x[None, :], nodes.shape[0], axis=0), nodes])
        value, row = _atom_envelope(spec_psi.value_z(z), nodes, v)
        kinetic += w * value
        rows.append(row)
    interaction = phi(PotentialSpec('zero'), spec_U, f)
    value = float(kinetic + interaction)
    mixture = KernelMixture(np.ones(1), (_kernel_from_rows(f, np.stack(rows), nodes),))
    original = phi(spec_psi, spec_U, f)
    logger.info("relax_envelope", value=value, phi=original, atoms=f.size)
    return RelaxReport(value=min(value, original), phi=original, mixture=mixture, grid=grid,
                       method='envelope', lower=min(value, original))


# ---------------------------------------------------------------------------
# Frank-Wolfe
# ---------------------------------------------------------------------------

def _frank_wolfe(pi: np.ndarray, w: np.ndarray, c: np.ndarray, B: np.ndarray,
                 linear: np.ndarray, oracle, max_iter: int, tol: float) -> Tuple[np.ndarray, int]:
    """
    Minimize Phi(f pi) - <linear, pi> from pi with the given linear oracle.
    Steps are exact because the objective is quadratic along every segment.
    """
    K, S = pi.shape
    for iteration in range(max_iter):
        q = _masses(pi, w)
        grad = w[:, None] * (c + B @ q).reshape(K, S) - linear
        vertex = oracle(grad)
        direction = vertex - pi
        slope = float(np.sum(grad * direction))
        if slope > -tol:
            return pi, iteration
        dq = _masses(direction, w)
        pi = pi + _exact_step(slope, float(dq @ B @ dq)) * direction
    return pi, max_iter


def _simplex_oracle(grad: np.ndarray) -> np.ndarray:
    vertex = np.zeros_like(grad)
    vertex[np.arange(grad.shape[0]), grad.argmin(axis=1)] = 1.0
    return vertex


def _martingale_oracle(velocities: np.ndarray, nodes: np.ndarray):
    S = nodes.shape[0]
    A_eq = np.vstack([nodes.T, np.ones(S)])

    def oracle(grad: np.ndarray) -> np.ndarray:
        rows = []
        for g, v in zip(grad, velocities):
            result = linprog(g, A_eq=A_eq, b_eq=np.concatenate([v, [1.0]]),
                             bounds=(0, None), method='highs')
            if result.status != 0:
                raise NumericalError("martingale oracle LP failed", {'message': result.message})
            rows.append(np.clip(result.x, 0.0, None))
        return np.stack(rows)

    return oracle


def relax_increasing(f: DiscreteStatistic, spec_psi: PotentialSpec,
                     spec_U: Optional[PotentialSpec] = None,
                     grid: Optional[VelocityGrid] = None, starts: int = 8, seed: int = 0,
                     max_iter: int = 200, tol: float = 1e-12) -> RelaxReport:
    """
    Single-component relaxation: min Phi(f pi) over martingale kernels on the
    grid, which is the increasing envelope Phi^inc restricted to the grid.
    """
    grid = grid if grid is not None else default_grid(f, spec_psi, spec_U, seed=seed)
    nodes = _check_grid(f, grid)
    c, B = quadratic_form(f, grid, spec_psi, spec_U)
    oracle = _martingale_oracle(f.velocities, nodes)
    rng = make_rng(seed, 'relax_increasing')
    zero = np.zeros((f.size, nodes.shape[0]))

    best_pi = _neighbour_split(f.velocities, grid)
    best = _energy(best_pi, f.weights, c, B)
    iterations = 0
    for start in range(max(1, starts)):
        pi = best_pi.copy() if start == 0 else oracle(rng.standard_normal(zero.shape))
        pi, used = _frank_wolfe(pi, f.weights, c, B, zero, oracle, max_iter, tol)
        iterations += used
        value = _energy(pi, f.weights, c, B)
        if value < best - 1e-15:
            best, best_pi = value, pi
    original = phi(spec_psi, spec_U, f)
    mixture = KernelMixture(np.ones(1), (_kernel_from_rows(f, best_pi, nodes),))
    logger.info("relax_increasing", value=best, phi=original, iterations=iterations)
    return RelaxReport(value=min(best, original), phi=original, mixture=mixture, grid=grid,
                       method='increasing', diagnostics={'iterations': iterations})


# ---------------------------------------------------------------------------
# Column generation
# ---------------------------------------------------------------------------

def _master(costs: List[float], barycentres: List[np.ndarray], target: np.ndarray):
    A_eq = np.vstack([np.stack(barycentres, axis=1), np.ones((1, len(costs)))])
    b_eq = np.concatenate([target, [1.0]])
    result = linprog(np.asarray(costs), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method='highs',
                     options=HIGHS_OPTIONS)
    if result.status != 0:
        raise NumericalError("relaxation master LP failed",
                             {'status': int(result.status), 'message': result.message})
    duals = np.asarray(result.eqlin.marginals)
    return result, duals[:-1], float(duals[-1])


def _polish(weights: np.ndarray, barycentres: List[np.ndarray], target: np.ndarray) -> np.ndarray:
    """Re-solve the active equality system exactly; keeps the LP weights if that fails."""
    active = np.flatnonzero(weights > 1e-12)
    A = np.vstack([np.stack([barycentres[j] for j in active], axis=1), np.ones((1, active.size))])
    b = np.concatenate([target, [1.0]])
    solution = np.linalg.lstsq(A, b, rcond=None)[0]
    if np.all(solution >= -1e-12) and np.abs(A @ solution - b).max() < 1e-12:
        weights = np.zeros_like(weights)
        weights[active] = np.clip(solution, 0.0, None)
    return weights


def relax(f: DiscreteStatistic, spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec] = None,
          grid: Optional[VelocityGrid] = None, components: int = 4, starts: int = 8,
          seed: int = 0, max_rounds: int = 60, max_iter: int = 200,
          tol: float = 1e-10) -> RelaxReport:
    """
    Relaxed energy of a finite statistic on a bounded velocity grid.

    Args:
        f: Source statistic
        grid: Kernel support grid (defaults to the audited radius)
        components: Expected mixture size; larger optimal mixtures are reported
        starts: Frank-Wolfe starts per pricing round
        seed: Seed of the pricing starts

    Returns:
        RelaxReport with value min(best mixture, Phi(f)); `lower` is a dual
        bound when pricing is exact on the grid

    Raises:
        ValidationError: Grid too large or atoms outside the grid
        NumericalError: Master LP failure
    """
    spec_U = spec_U if spec_U is not None else PotentialSpec('zero')
    grid = grid if grid is not None else default_grid(f, spec_psi, spec_U, seed=seed)
    nodes = _check_grid(f, grid)
    if spec_psi.kind != 'variance_penalty' and not spec_U.depends_on_velocity():
        return _relax_by_envelope(f, spec_psi, spec_U, grid, nodes)

    w = f.weights
    c, B = quadratic_form(f, grid, spec_psi, spec_U)
    original = phi(spec_psi, spec_U, f)
    target = f.velocities.ravel()
    rng = make_rng(seed, 'relax')
    K, S = f.size, nodes.shape[0]

    increasing = relax_increasing(f, spec_psi, spec_U, grid, starts=2, seed=seed, max_iter=max_iter)
    columns = [_neighbour_split(f.velocities, grid)]
    columns.append(np.stack([_dense_row(k, increasing.mixture.kernels[0], nodes)
                             for k in range(K)]))
    costs = [_energy(pi, w, c, B) for pi in columns]
    barycentres = [(pi @ nodes).ravel() for pi in columns]

    converged, rounds, reduced = False, 0, 0.0
    pricing_exact = not np.any(B)
    for rounds in range(1, max_rounds + 1):
        result, mu, nu = _master(costs, barycentres, target)
        linear = mu.reshape(K, -1) @ nodes.T
        active = [columns[j] for j in np.flatnonzero(result.x > 1e-12)]
        candidates = []
        for start in range(starts):
            if start < len(active):
                pi = active[start].copy()
            else:
                pi = np.zeros((K, S))
                pi[np.arange(K), rng.integers(0, S, size=K)] = 1.0
            pi, _ = _frank_wolfe(pi, w, c, B, linear, _simplex_oracle, max_iter, 1e-14)
            cost = _energy(pi, w, c, B)
            reduced_cost = cost - float(mu @ (pi @ nodes).ravel()) - nu
            candidates.append((reduced_cost, cost, pi))
        candidates.sort(key=lambda item: item[0])
        reduced = candidates[0][0]
        added = 0
        for reduced_cost, cost, pi in candidates:
            if reduced_cost >= -tol or added >= 4:
                break
            if any(np.allclose(pi, other, atol=1e-12) for other in columns):
                continue
            columns.append(pi)
            costs.append(cost)
            barycentres.append((pi @ nodes).ravel())
            added += 1
        logger.debug("relax_round", round=rounds, value=float(result.fun), reduced_cost=reduced,
                     columns=len(columns))
        if added == 0:
            converged = True
            break

    result, mu, nu = _master(costs, barycentres, target)
    weights = _polish(result.x, barycentres, target)
    best = float(np.dot(costs, weights))
    active = np.flatnonzero(weights > 1e-12)
    lambdas = weights[active] / weights[active].sum()
    kernels = [_kernel_from_rows(f, _martingale_clean(columns[j]), nodes) for j in active]
    mixture = KernelMixture(lambdas, tuple(kernels))
    lower = best + min(0.0, reduced) if pricing_exact and converged else None
    if mixture.components > components:
        logger.warning("relax_components_exceeded", used=mixture.components, expected=components)
    if not converged:
        logger.warning("relax_not_converged", rounds=rounds, value=best, reduced_cost=reduced)
    value = min(best, original)
    if original <= best:
        mixture = KernelMixture.identity(f)
    logger.info("relax_finished", value=value, phi=original, rounds=rounds, columns=len(columns),
                components=mixture.components, increasing=increasing.value)
    return RelaxReport(value=value, phi=original, mixture=mixture, grid=grid,
                       method='column_generation', lower=lower, rounds=rounds,
                       columns=len(columns), converged=converged,
                       diagnostics={'increasing': increasing.value, 'reduced_cost': reduced,
                                    'grid_value': best})


def _dense_row(k: int, kernel: VelocityKernel, nodes: np.ndarray) -> np.ndarray:
    row = np.zeros(nodes.shape[0])
    for target, p in zip(kernel.targets[k], kernel.probabilities[k]):
        row[int(np.argmin(np.abs(nodes - target).sum(axis=1)))] += p
    return row


def _martingale_clean(pi: np.ndarray) -> np.ndarray:
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum(axis=1, keepdims=True)


def split_structure(report: RelaxReport, atom: int, expected: Sequence[float],
                    tol: Optional[float] = None) -> Dict[str, Any]:
    """
    Share of the atom's aggregate kernel mass that lands within `tol` of the
    expected targets (one-dimensional).
    """
    if report.mixture is None:
        raise ValidationError("report carries no mixture")
    tol = tol if tol is not None else 0.5 * report.grid.spacing
    share = 0.0
    for weight, kernel in zip(report.mixture.weights, report.mixture.kernels):
        targets = kernel.targets[atom][:, 0]
        near = np.min(np.abs(targets[:, None] - np.asarray(expected)[None, :]), axis=1) <= tol
        share += weight * float(kernel.probabilities[atom][near].sum())
    structure = {'atom': atom, 'expected': list(expected), 'share': share, 'matches': share >= 0.9}
    logger.info("relax_split_structure", **structure)
    return structure


# ---------------------------------------------------------------------------
# Recovery sequences
# ---------------------------------------------------------------------------

def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = np.asarray(shares, dtype=float) * total
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind='stable')
    counts[order[:max(total - counts.sum(), 0)]] += 1
    return counts


def _denominator(shares: Sequence[np.ndarray], base: int, k: int) -> int:
    """
    Smallest count up to base * k that represents every share exactly.

    Falls back to base * k, where the rounding error per share is below
    1 / (base * k) and so vanishes as k grows.
    """
    values = np.concatenate([np.ravel(s) for s in shares])
    for r in range(1, base * k + 1):
        scaled = values * r
        if np.allclose(scaled, np.round(scaled), rtol=0.0, atol=1e-9):
            return r
    return base * k


def _block_schedule(mixture: Optional[KernelMixture], atom: int, velocity: np.ndarray,
                    copy: int, slots: int, cycle: int) -> np.ndarray:
    """Velocities of one copy over one block of slots * cycle sub-steps."""
    if mixture is None:
        return np.repeat(velocity[None, :], slots * cycle, axis=0)
    schedule = []
    for kernel, count in zip(mixture.kernels, _largest_remainder(mixture.weights, slots)):
        if count == 0:
            continue
        hits = _largest_remainder(kernel.probabilities[atom], cycle)
        sequence = np.roll(np.repeat(kernel.targets[atom], hits, axis=0), -copy, axis=0)
        schedule.extend([sequence] * int(count))
    schedule = np.vstack(schedule)
    # rounding drift is spread evenly so the block ends on the base path
    return schedule + (velocity - schedule.mean(axis=0))[None, :]


def recovery_ensemble(base: PathEnsemble, mixtures: Sequence[Optional[KernelMixture]], k: int,
                      resolution: int = 8) -> PathEnsemble:
    """
    Oscillating copies of every base path that realize the interval mixtures.

    Each interval is cut into k blocks; inside a block the mixture components
    take consecutive stretches in proportion to their weights and, inside a
    stretch, the copies cycle through the kernel targets with phase shifts.
    Weights and kernel probabilities are counted in units of 1/P and 1/Q,
    where P and Q are the smallest denominators up to `resolution * k` that
    represent them exactly (else `resolution * k`).
    Every copy passes through the base nodes, so the endpoint coupling is
    untouched. Sub-steps per interval grow like k * P * Q.
    """
    M = base.grid.steps
    if len(mixtures) != M:
        raise ValidationError(f"need one mixture per interval, got {len(mixtures)} for {M}")
    if k < 1 or resolution < 1:
        raise ValidationError("k and resolution must be positive")
    for i, mixture in enumerate(mixtures):
        if mixture is None:
            continue
        f = statistic_at_interval(base, i)
        source = mixture.source
        if (source.size != f.size or not np.allclose(source.positions, f.positions, atol=1e-12)
                or not np.allclose(source.velocities, f.velocities, atol=1e-12)):
            raise ValidationError(f"mixture source does not match interval {i}")
        if not mixture.is_martingale(tol=1e-9):
            raise ValidationError(f"infeasible mixture on interval {i}",
                                  {'gap': float(np.abs(mixture.aggregate_means() - f.velocities).max())})

    used = [mixture for mixture in mixtures if mixture is not None]
    if not used:
        return base

    slots = _denominator([m.weights for m in used], resolution, k)
    cycle = _denominator([p for m in used for kernel in m.kernels for p in kernel.probabilities],
                         resolution, k)
    steps = slots * cycle
    fine = TimeGrid(base.grid.T, M * k * steps)
    h = fine.dt
    N, d = base.size, base.dim
    nodes = np.zeros((N * cycle, fine.steps + 1, d))
    weights = np.repeat(base.weights / cycle, cycle)
    velocities = base.velocities
    for n in range(N):
        for q in range(cycle):
            row = n * cycle + q
            for i in range(M):
                schedule = _block_schedule(mixtures[i], n, velocities[n, i], q, slots, cycle)
                offsets = np.vstack([np.zeros((1, d)), h * np.cumsum(schedule, axis=0)[:-1]])
                left, right = base.nodes[n, i], base.nodes[n, i + 1]
                for b in range(k):
                    start = (i * k + b) * steps
                    nodes[row, start:start + steps] = left + (b / k) * (right - left) + offsets
            nodes[row, -1] = base.nodes[n, -1]
    logger.info("recovery_ensemble", paths=N * cycle, steps=fine.steps, k=k, slots=slots, cycle=cycle)
    return PathEnsemble(fine, nodes, weights)


# ---------------------------------------------------------------------------
# Convex order
# ---------------------------------------------------------------------------

@dataclass
class ConvexOrderResult:
    """Outcome of testing f <= g in the v-convex order."""
    holds: bool
    violation: float
    tested: int
    witness: Optional[VelocityKernel] = None
    reason: str = ''

    def to_dict(self) -> Dict[str, Any]:
        return {'holds': self.holds, 'violation': self.violation, 'tested': self.tested,
                'reason': self.reason, 'has_witness': self.witness is not None}


def _directions(d: int, count: int = 16) -> np.ndarray:
    if d == 1:
        return np.array([[1.0], [-1.0]])
    angles = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
    if d == 2:
        return np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return np.vstack([np.eye(d), -np.eye(d)])


def _hinge_violation(fv: np.ndarray, fw: np.ndarray, gv: np.ndarray, gw: np.ndarray) -> Tuple[float, int]:
    """max over hinge and linear tests of <f, phi> - <g, phi>."""
    d = fv.shape[1]
    worst, tested = 0.0, 0
    for theta in _directions(d):
        fp, gp = fv @ theta, gv @ theta
        worst = max(worst, abs(float(fw @ fp - gw @ gp)))
        tested += 1
        for anchor in np.concatenate([fp, gp]):
            worst = max(worst, float(fw @ np.maximum(fp - anchor, 0.0)
                                     - gw @ np.maximum(gp - anchor, 0.0)))
            tested += 1
    return worst, tested


def convex_order_check(f: DiscreteStatistic, g: DiscreteStatistic,
                       tol: float = 1e-9) -> ConvexOrderResult:
    """
    Test f <= g in the v-convex order.

    Hinge functions (theta.v - a)_+ anchored at the support projections and
    the linear functions theta.v are checked per position; when they pass a
    martingale kernel with g = f pi is searched by LP feasibility and returned
    as the witness.
    """
    if f.dim != g.dim:
        raise ValidationError("convex order needs equal dimensions")
    fx, fm = f.position_marginal()
    gx, gm = g.position_marginal()
    if fx.shape != gx.shape or not np.allclose(fx, gx, atol=1e-12) or not np.allclose(fm, gm, atol=1e-12):
        return ConvexOrderResult(False, float('inf'), 0, reason='position marginals differ')

    violation, tested = 0.0, 0
    for x in fx:
        fsel = np.all(np.isclose(f.positions, x, atol=1e-12), axis=1)
        gsel = np.all(np.isclose(g.positions, x, atol=1e-12), axis=1)
        worst, count = _hinge_violation(f.velocities[fsel], f.weights[fsel],
                                        g.velocities[gsel], g.weights[gsel])
        violation = max(violation, worst)
        tested += count
    if violation > tol:
        return ConvexOrderResult(False, violation, tested, reason='test function violated')

    targets: List[np.ndarray] = [np.zeros((0, f.dim))] * f.size
    probabilities: List[np.ndarray] = [np.zeros(0)] * f.size
    for x in fx:
        rows = np.flatnonzero(np.all(np.isclose(f.positions, x, atol=1e-12), axis=1))
        cols = np.flatnonzero(np.all(np.isclose(g.positions, x, atol=1e-12), axis=1))
        plan = _martingale_plan(f.velocities[rows], f.weights[rows],
                                g.velocities[cols], g.weights[cols])
        if plan is None:
            return ConvexOrderResult(False, violation, tested, reason='no martingale kernel')
        for a, k in enumerate(rows):
            keep = plan[a] > PROBABILITY_FLOOR
            targets[k] = g.velocities[cols][keep]
            probabilities[k] = plan[a][keep] / plan[a][keep].sum()
    witness = VelocityKernel(f, tuple(targets), tuple(probabilities))
    return ConvexOrderResult(True, violation, tested, witness=witness)


def _martingale_plan(fv: np.ndarray, fw: np.ndarray, gv: np.ndarray,
                     gw: np.ndarray) -> Optional[np.ndarray]:
    A, Bn = fv.shape[0], gv.shape[0]
    d = fv.shape[1]
    rows, rhs = [], []
    for a in range(A):
        r = np.zeros((A, Bn))
        r[a, :] = 1.0
        rows.append(r.ravel())
        rhs.append(fw[a])
        for axis in range(d):
            r = np.zeros((A, Bn))
            r[a, :] = gv[:, axis]
            rows.append(r.ravel())
            rhs.append(fw[a] * fv[a, axis])
    for b in range(Bn):
        r = np.zeros((A, Bn))
        r[:, b] = 1.0
        rows.append(r.ravel())
        rhs.append(gw[b])
    result = linprog(np.zeros(A * Bn), A_eq=np.array(rows), b_eq=np.array(rhs),
                     bounds=(0, None), method='highs')
    if result.status != 0:
        return None
    plan = np.clip(result.x.reshape(A, Bn), 0.0, None)
    return plan / np.maximum(plan.sum(axis=1, keepdims=True), 1e-300) * fw[:, None]
