"""
One-dimensional Eulerian transport with interaction

Fields (rho, V) live on a uniform cell grid with one slice per time interval.
Provides the Eulerian collapse of path ensembles, the Eulerian action, the
free-endpoint problem over particle pairings, and the Hamilton-Jacobi-Bellman
check of optimal fields.
"""

import itertools
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy.integrate import cumulative_trapezoid

from .action import phi
from .core import (DiscreteStatistic, EndpointCoupling, NumericalError, PathEnsemble, TimeGrid,
                   ValidationError, quantize_1d)
from .nbody import OptimizeOptions, OptimizeReport, optimize
from .potentials import MeanFieldLagrangian, PotentialSpec, is_pair_convex

logger = structlog.get_logger(__name__)

MAX_PARTICLES = 10
EXHAUSTIVE_LIMIT = 5
SUPPORT_THRESHOLD = 1e-6


@dataclass(frozen=True)
class SpaceGrid:
    """J uniform cells covering [a, b]."""
    a: float
    b: float
    cells: int

    def __post_init__(self):
        if not self.b > self.a or self.cells < 1:
            raise ValidationError("space grid needs a < b and at least one cell",
                                  {'a': self.a, 'b': self.b, 'cells': self.cells})

    @property
    def width(self) -> float:
        return (self.b - self.a) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.a + (np.arange(self.cells) + 0.5) * self.width

    def locate(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if np.any(x < self.a - 1e-12) or np.any(x > self.b + 1e-12):
            raise ValidationError("positions outside the space grid",
                                  {'min': float(x.min()), 'max': float(x.max()),
                                   'a': self.a, 'b': self.b})
        return np.clip(np.floor((x - self.a) / self.width).astype(int), 0, self.cells - 1)

    def to_dict(self) -> Dict[str, Any]:
        return {'a': self.a, 'b': self.b, 'cells': self.cells}


@dataclass(frozen=True)
class EulerianField1D:
    """
    Cell masses rho and cell velocities V, shape (M, J), one slice per time
    interval of `grid`; each slice of rho sums to one.
    """
    grid: TimeGrid
    space: SpaceGrid
    rho: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        velocity = np.array(self.velocity, dtype=float)
        shape = (self.grid.steps, self.space.cells)
        if rho.shape != shape or velocity.shape != shape:
            raise ValidationError(f"field arrays must have shape {shape}",
                                  {'rho': list(rho.shape), 'velocity': list(velocity.shape)})
        if np.any(rho < 0) or not np.all(np.isfinite(rho)) or not np.all(np.isfinite(velocity)):
            raise ValidationError("rho must be finite and nonnegative, V finite")
        totals = rho.sum(axis=1)
        if np.any(np.abs(totals - 1.0) > 1e-6):
            raise ValidationError("every rho slice must sum to one",
                                  {'worst': float(np.abs(totals - 1.0).max())})
        rho /= totals[:, None]
        rho.setflags(write=False)
        velocity.setflags(write=False)
        object.__setattr__(self, 'rho', rho)
        object.__setattr__(self, 'velocity', velocity)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times[:-1]

    @property
    def slices(self) -> int:
        return self.grid.steps

    def support(self, i: int, threshold: float = SUPPORT_THRESHOLD) -> np.ndarray:
        """Cells of slice i with mass above threshold * max."""
        row = self.rho[i]
        return row > threshold * row.max()


def field_statistic(fld: EulerianField1D, i: int, threshold: float = 0.0) -> DiscreteStatistic:
    """Atoms at the occupied cell centres of slice i, carrying cell masses and velocities."""
    occupied = fld.rho[i] > threshold * fld.rho[i].max() if threshold else fld.rho[i] > 0
    centers = fld.space.centers[occupied]
    return DiscreteStatistic(centers[:, None], fld.velocity[i, occupied][:, None],
                             fld.rho[i, occupied])


def eulerian_collapse(ens: PathEnsemble, space: SpaceGrid) -> EulerianField1D:
    """
    Bin each interval statistic into cells: rho is the binned mass and V the
    conditional mean velocity (zero on empty cells).
    """
    if ens.dim != 1:
        raise ValidationError("Eulerian fields are one-dimensional")
    M, J = ens.grid.steps, space.cells
    rho = np.zeros((M, J))
    momentum = np.zeros((M, J))
    velocities = ens.velocities[:, :, 0]
    for i in range(M):
        cells = space.locate(ens.nodes[:, i, 0])
        np.add.at(rho[i], cells, ens.weights)
        np.add.at(momentum[i], cells, ens.weights * velocities[:, i])
    velocity = np.divide(momentum, rho, out=np.zeros_like(momentum), where=rho > 0)
    return EulerianField1D(ens.grid, space, rho, velocity)


def perturb_velocity(fld: EulerianField1D, amplitude: float, wavenumber: float = 1.0) -> EulerianField1D:
    """Same rho with V + amplitude * sin(2 pi wavenumber (x - a) / (b - a))."""
    phase = 2 * np.pi * wavenumber * (fld.space.centers - fld.space.a) / (fld.space.b - fld.space.a)
    return replace(fld, velocity=fld.velocity + amplitude * np.sin(phase)[None, :])


def continuity_residual(fld: EulerianField1D) -> float:
    """
    Largest |d_t rho + d_x (rho V)| over interior cells, in density units,
    with forward time differences and upwind fluxes.
    """
    dx, dt = fld.space.width, fld.grid.dt
    if fld.slices < 2 or fld.space.cells < 3:
        return 0.0
    density = fld.rho / dx
    V = fld.velocity
    flux = np.zeros((fld.slices, fld.space.cells + 1))
    flux[:, 1:-1] = (density[:, :-1] * np.maximum(V[:, :-1], 0.0)
                     + density[:, 1:] * np.minimum(V[:, 1:], 0.0))
    defect = (density[1:] - density[:-1]) / dt + (flux[:-1, 1:] - flux[:-1, :-1]) / dx
    return float(np.abs(defect[:, 1:-1]).max())


def eulerian_action(fld: EulerianField1D, spec_psi: PotentialSpec,
                    spec_U: Optional[PotentialSpec] = None, check_convexity: bool = True) -> float:
    """
    sum over slices of dt * Phi(f(rho_t, V_t)).

    Phi is used in place of its relaxation, which is exact only when psi_2 is
    convex in (v, v'); other potentials are rejected.
    """
    if check_convexity and not is_pair_convex(spec_psi, spec_U, d=1):
        raise ValidationError(
            "psi_2 is not (v, v')-convex; the Eulerian action needs the relaxed energy, "
            "use the relaxation module", {'psi': spec_psi.kind,
                                          'U': None if spec_U is None else spec_U.kind})
    dt = fld.grid.dt
    return float(sum(dt * phi(spec_psi, spec_U, field_statistic(fld, i))
                     for i in range(fld.slices)))


# ---------------------------------------------------------------------------
# Free endpoints
# ---------------------------------------------------------------------------

@dataclass
class FreeEndpointResult:
    """Optimal particle pairing between two marginals and its Eulerian field."""
    field: EulerianField1D
    report: OptimizeReport
    pairing: Tuple[int, ...]
    action: float
    starts: np.ndarray
    ends: np.ndarray
    evaluated: int
    candidates: Dict[Tuple[int, ...], float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'action': self.action,
            'pairing': list(self.pairing),
            'starts': self.starts.tolist(),
            'ends': self.ends.tolist(),
            'pairings_evaluated': self.evaluated,
            'optimizer': self.report.to_dict(),
        }


def field_from_ensemble_pairing(starts: np.ndarray, ends: np.ndarray, pairing: Sequence[int],
                                grid: TimeGrid, space: SpaceGrid, spec_psi: PotentialSpec,
                                spec_U: Optional[PotentialSpec] = None,
                                opts: Optional[OptimizeOptions] = None
                                ) -> Tuple[OptimizeReport, EulerianField1D]:
    """Optimize the paths of one pairing and collapse them to a field."""
    coupling = EndpointCoupling.uniform(np.asarray(starts)[:, None],
                                        np.asarray(ends)[list(pairing)][:, None])
    report = optimize(coupling, grid, spec_psi, spec_U, opts)
    return report, eulerian_collapse(report.ensemble, space)


def solve_free_endpoint(mu0: Sequence[float], muT: Sequence[float], space: SpaceGrid,
                        grid: TimeGrid, spec_psi: PotentialSpec,
                        spec_U: Optional[PotentialSpec] = None, particles: int = 6,
                        opts: Optional[OptimizeOptions] = None) -> FreeEndpointResult:
    """
    Minimize the action over couplings of two cell-mass marginals.

    Both marginals are quantized to `particles` equal-mass atoms; pairings are
    enumerated exhaustively up to EXHAUSTIVE_LIMIT atoms and improved by
    pairwise swaps from the monotone pairing beyond that. Each pairing is
    scored by its optimized N-body action.
    """
    if particles < 1 or particles > MAX_PARTICLES:
        raise ValidationError(f"particle count must be in [1, {MAX_PARTICLES}]",
                              {'particles': particles})
    mu0 = np.asarray(mu0, dtype=float)
    muT = np.asarray(muT, dtype=float)
    if mu0.shape != (space.cells,) or muT.shape != (space.cells,):
        raise ValidationError("marginals must have one mass per cell of the space grid")
    starts = quantize_1d(space.centers, mu0, particles)
    ends = quantize_1d(space.centers, muT, particles)

    cache: Dict[Tuple[Tuple[float, float], ...], Tuple[float, OptimizeReport]] = {}
    scores: Dict[Tuple[int, ...], float] = {}

    def evaluate(pairing: Tuple[int, ...]) -> float:
        key = tuple(sorted(zip(starts.tolist(), ends[list(pairing)].tolist())))
        if key not in cache:
            coupling = EndpointCoupling.uniform(starts[:, None], ends[list(pairing)][:, None])
            report = optimize(coupling, grid, spec_psi, spec_U, opts)
            cache[key] = (report.final_action, report)
        scores[pairing] = cache[key][0]
        return cache[key][0]

    identity = tuple(range(particles))
    best, best_value = identity, evaluate(identity)
    if particles <= EXHAUSTIVE_LIMIT:
        for pairing in itertools.permutations(range(particles)):
            value = evaluate(pairing)
            if value < best_value - 1e-12:
                best, best_value = pairing, value
    else:
        improved = True
        while improved:
            improved = False
            for i, j in itertools.combinations(range(particles), 2):
                trial = list(best)
                trial[i], trial[j] = trial[j], trial[i]
                value = evaluate(tuple(trial))
                if value < best_value - 1e-12:
                    best, best_value, improved = tuple(trial), value, True

    key = tuple(sorted(zip(starts.tolist(), ends[list(best)].tolist())))
    report = cache[key][1]
    fld = eulerian_collapse(report.ensemble, space)
    logger.info("free_endpoint_solved", particles=particles, pairing=list(best),
                action=best_value, evaluated=len(cache))
    return FreeEndpointResult(field=fld, report=report, pairing=best, action=best_value,
                              starts=starts, ends=ends, evaluated=len(cache), candidates=scores)


# ---------------------------------------------------------------------------
# Legendre transforms and the HJB check
# ---------------------------------------------------------------------------

def _recover_velocity(lag: MeanFieldLagrangian, x: np.ndarray, p: np.ndarray, v: np.ndarray,
                      tol: float = 1e-12, max_iter: int = 60) -> np.ndarray:
    """Newton on d_v L(x, v) = p, one scalar equation per point."""
    for _ in range(max_iter):
        z = np.stack([x, v], axis=1)
        gap = lag.grad_z(z)[:, 1] - p
        if np.abs(gap).max() < tol:
            return v
        curvature = lag.hess_z(z)[:, 1, 1]
        if np.any(curvature <= 0):
            raise NumericalError("L is not strictly convex in v", {'min_curvature': float(curvature.min())})
        v = v - gap / curvature
    raise NumericalError("Legendre inversion did not converge", {'residual': float(np.abs(gap).max())})


def legendre_transform(lag: MeanFieldLagrangian, x: Any, p: Any,
                       v0: Optional[Any] = None) -> Tuple[np.ndarray, np.ndarray]:
    """L*(x, p) = p v* - L(x, v*) with d_v L(x, v*) = p; returns (L*, v*)."""
    if lag.dim != 1:
        raise ValidationError("Legendre transforms are one-dimensional here")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = np.atleast_1d(np.asarray(p, dtype=float))
    v = np.zeros_like(p) if v0 is None else np.atleast_1d(np.asarray(v0, dtype=float)).copy()
    v = _recover_velocity(lag, x, p, v)
    return p * v - lag.value_z(np.stack([x, v], axis=1)), v


def legendre_biconjugate(lag: MeanFieldLagrangian, x: Any, v: Any, tol: float = 1e-12,
                         max_iter: int = 60) -> np.ndarray:
    """L**(x, v) = sup_p (p v - L*(x, p)) by Newton on d_p L*(x, p) = v from p = 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    p = np.zeros_like(v)
    guess = np.zeros_like(v)
    for _ in range(max_iter):
        conjugate, v_star = legendre_transform(lag, x, p, guess)
        gap = v_star - v
        if np.abs(gap).max() < tol:
            return p * v - conjugate
        # d v*/d p = 1 / L_vv(x, v*)
        p = p - gap * lag.hess_z(np.stack([x, v_star], axis=1))[:, 1, 1]
        guess = v_star
    raise NumericalError("biconjugate Newton did not converge", {'residual': float(np.abs(gap).max())})


def _components(mask: np.ndarray) -> List[np.ndarray]:
    """Index arrays of the maximal runs of True cells."""
    runs, current = [], []
    for j, occupied in enumerate(mask):
        if occupied:
            current.append(j)
        elif current:
            runs.append(np.asarray(current))
            current = []
    if current:
        runs.append(np.asarray(current))
    return runs


@dataclass
class SupportComponent:
    """One run of cells occupied on slices i - 1, i and i + 1."""
    slice: int
    first_cell: int
    last_cell: int
    constant: float
    max_deviation: float

    def to_dict(self) -> Dict[str, Any]:
        return {'slice': self.slice, 'first_cell': self.first_cell, 'last_cell': self.last_cell,
                'constant': self.constant, 'max_deviation': self.max_deviation}


@dataclass
class HJBReport:
    """
    Potential Xi on every support component (zero at the component's first
    cell), the residual d_t Xi + L*(x, d_x Xi) on evaluated cells, and one
    constant per component. `constants` holds c(t) for slices with a single
    component and NaN otherwise.
    """
    xi: np.ndarray
    residual: np.ndarray
    constants: np.ndarray
    max_deviation: float
    components: np.ndarray
    evaluated_slices: List[int]
    component_reports: List[SupportComponent] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'max_deviation': self.max_deviation,
            'constants': [None if np.isnan(c) else float(c) for c in self.constants],
            'components': self.components.tolist(),
            'evaluated_slices': self.evaluated_slices,
            'component_reports': [c.to_dict() for c in self.component_reports],
        }


def hjb_residual(fld: EulerianField1D, spec_psi: PotentialSpec,
                 spec_U: Optional[PotentialSpec] = None,
                 threshold: float = SUPPORT_THRESHOLD) -> HJBReport:
    """
    Check d_t Xi + L*_t(x, d_x Xi) = c(t) on the support of an Eulerian field.

    p = d_v L[f_t](x, V) is known on occupied cells only. The centred time
    difference at slice i is taken on cells occupied at i - 1, i and i + 1;
    each maximal run of such cells is a component with its own Xi (the
    cumulative trapezoid integral of p from the run's first cell), its own
    constant (the median residual) and its own deviation. Nothing is
    interpolated across empty cells.
    """
    S, J = fld.rho.shape
    if S < 3:
        raise ValidationError("HJB check needs at least three time slices")
    centers = fld.space.centers
    p = np.full((S, J), np.nan)
    conjugate = np.full((S, J), np.nan)
    xi = np.full((S, J), np.nan)
    masks = []
    for i in range(S):
        mask = fld.support(i, threshold)
        masks.append(mask)
        lag = MeanFieldLagrangian(spec_psi, spec_U, field_statistic(fld, i, threshold))
        x, V = centers[mask], fld.velocity[i, mask]
        p[i, mask] = lag.grad_z(np.stack([x, V], axis=1))[:, 1]
        conjugate[i, mask] = legendre_transform(lag, x, p[i, mask], V)[0]
        for run in _components(mask):
            xi[i, run] = cumulative_trapezoid(p[i, run], centers[run], initial=0.0)

    residual = np.full((S, J), np.nan)
    constants = np.full(S, np.nan)
    components = np.zeros(S, dtype=int)
    reports: List[SupportComponent] = []
    for i in range(1, S - 1):
        for run in _components(masks[i - 1] & masks[i] & masks[i + 1]):
            xs = centers[run]
            later = cumulative_trapezoid(p[i + 1, run], xs, initial=0.0)
            earlier = cumulative_trapezoid(p[i - 1, run], xs, initial=0.0)
            values = (later - earlier) / (2 * fld.grid.dt) + conjugate[i, run]
            constant = float(np.median(values))
            residual[i, run] = values
            reports.append(SupportComponent(i, int(run[0]), int(run[-1]), constant,
                                            float(np.abs(values - constant).max())))
            components[i] += 1
            constants[i] = constant if components[i] == 1 else np.nan

    evaluated = [i for i in range(S) if components[i] > 0]
    deviation = max((c.max_deviation for c in reports), default=0.0)
    if not reports:
        logger.warning("hjb_support_never_overlaps", slices=S, cells=J)
    elif components.max() > 1:
        logger.info("hjb_disconnected_support", max_components=int(components.max()))
    logger.info("hjb_residual", max_deviation=deviation, slices=S, cells=J,
                components=len(reports))
    return HJBReport(xi=xi, residual=residual, constants=constants, max_deviation=deviation,
                     components=components, evaluated_slices=evaluated, component_reports=reports)
