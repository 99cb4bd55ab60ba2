#!/usr/bin/env python3
"""
Core data model for mean-field action computations

Phase-space statistics, path ensembles on uniform time grids, endpoint couplings
and finitely supported velocity kernels. Every type is an immutable value after
construction; arrays are stored read-only.
"""

import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog

logger = structlog.get_logger(__name__)

WEIGHT_TOL = 1e-12
# Weight sums further than this from 1 are rejected instead of renormalized.
RENORMALIZE_LIMIT = 1e-6


class MeanFieldError(Exception):
    """Base class for all package errors."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.details = details or {}


class ValidationError(MeanFieldError, ValueError):
    """Precondition, shape or weight violation."""


class NumericalError(MeanFieldError, RuntimeError):
    """A solver failed; `details` carries the best information available."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.setflags(write=False)
    return array


def _normalized_weights(weights: Sequence[float], what: str) -> np.ndarray:
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size == 0:
        raise ValidationError(f"{what} has no atoms")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError(f"{what} has negative or non-finite weights")
    total = float(w.sum())
    if abs(total - 1.0) > RENORMALIZE_LIMIT:
        raise ValidationError(f"{what} weights sum to {total}, expected 1",
                              {'sum': total})
    return _frozen(w / total)


def _as_points(values: Any, what: str) -> np.ndarray:
    points = np.asarray(values, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValidationError(f"{what} must be an (n, d) array, got shape {points.shape}")
    return points


@dataclass(frozen=True)
class PhasePoint:
    """A position-velocity pair (x, v) in R^d x R^d."""
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape or x.ndim != 1:
            raise ValidationError(f"x and v must share one dimension, got {x.shape} and {v.shape}")
        object.__setattr__(self, 'x', _frozen(x))
        object.__setattr__(self, 'v', _frozen(v))

    @property
    def dim(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class DiscreteStatistic:
    """
    Weighted finite point cloud in phase space.

    Atoms are stored column-wise: `positions` and `velocities` are (K, d) arrays,
    `weights` is a (K,) array summing to one.
    """
    positions: np.ndarray
    velocities: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = _as_points(self.positions, "positions")
        v = _as_points(self.velocities, "velocities")
        if x.shape != v.shape:
            raise ValidationError(f"positions {x.shape} and velocities {v.shape} differ")
        w = _normalized_weights(self.weights, "statistic")
        if w.shape[0] != x.shape[0]:
            raise ValidationError("one weight per atom is required")
        object.__setattr__(self, 'positions', _frozen(x))
        object.__setattr__(self, 'velocities', _frozen(v))
        object.__setattr__(self, 'weights', w)

    @classmethod
    def from_atoms(cls, atoms: Sequence[Tuple[PhasePoint, float]]) -> 'DiscreteStatistic':
        """Build a statistic from (PhasePoint, weight) pairs."""
        if not atoms:
            raise ValidationError("statistic has no atoms")
        dims = {point.dim for point, _ in atoms}
        if len(dims) != 1:
            raise ValidationError(f"atoms have mixed dimensions {sorted(dims)}")
        return cls(
            positions=np.stack([point.x for point, _ in atoms]),
            velocities=np.stack([point.v for point, _ in atoms]),
            weights=[weight for _, weight in atoms],
        )

    @classmethod
    def dirac(cls, x: Any, v: Any) -> 'DiscreteStatistic':
        point = PhasePoint(x, v)
        return cls(point.x[None, :], point.v[None, :], [1.0])

    @property
    def dim(self) -> int:
        return int(self.positions.shape[1])

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def atoms(self) -> List[Tuple[PhasePoint, float]]:
        return [(PhasePoint(x, v), float(w))
                for x, v, w in zip(self.positions, self.velocities, self.weights)]

    def mean_velocity(self) -> np.ndarray:
        return self.weights @ self.velocities

    def position_marginal(self) -> Tuple[np.ndarray, np.ndarray]:
        """f^x as (distinct positions, aggregated weights), lexicographically sorted."""
        unique, inverse = np.unique(self.positions, axis=0, return_inverse=True)
        masses = np.zeros(unique.shape[0])
        np.add.at(masses, inverse.reshape(-1), self.weights)
        return unique, masses

    def merge_duplicates(self) -> 'DiscreteStatistic':
        """Combine atoms with identical (x, v) and drop zero-weight atoms."""
        stacked = np.hstack([self.positions, self.velocities])
        unique, inverse = np.unique(stacked, axis=0, return_inverse=True)
        masses = np.zeros(unique.shape[0])
        np.add.at(masses, inverse.reshape(-1), self.weights)
        keep = masses > 0
        d = self.dim
        return DiscreteStatistic(unique[keep, :d], unique[keep, d:], masses[keep])


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition t_i = i T / M of [0, T]."""
    T: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValidationError(f"horizon T must be positive, got {self.T}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValidationError(f"steps must be an integer >= 1, got {self.steps}")
        object.__setattr__(self, 'T', float(self.T))
        object.__setattr__(self, 'steps', int(self.steps))

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def refine(self, factor: int) -> 'TimeGrid':
        return TimeGrid(self.T, self.steps * int(factor))


@dataclass(frozen=True)
class PathEnsemble:
    """
    N weighted piecewise-linear trajectories sharing one time grid.

    `nodes` has shape (N, M+1, d). The velocity on interval i is
    (node_{i+1} - node_i) / dt, attributed to the left node.
    """
    grid: TimeGrid
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 2:
            nodes = nodes[:, :, None]
        if nodes.ndim != 3 or nodes.shape[1] != self.grid.steps + 1:
            raise ValidationError(
                f"nodes must have shape (N, {self.grid.steps + 1}, d), got {nodes.shape}")
        if not np.all(np.isfinite(nodes)):
            raise ValidationError("path nodes must be finite")
        w = _normalized_weights(self.weights, "ensemble")
        if w.shape[0] != nodes.shape[0]:
            raise ValidationError("one weight per path is required")
        object.__setattr__(self, 'nodes', _frozen(nodes))
        object.__setattr__(self, 'weights', w)

    @classmethod
    def from_paths(cls, grid: TimeGrid, paths: Sequence[Tuple[Any, float]]) -> 'PathEnsemble':
        return cls(grid, np.stack([np.asarray(nodes, dtype=float) for nodes, _ in paths]),
                   [weight for _, weight in paths])

    @property
    def dim(self) -> int:
        return int(self.nodes.shape[2])

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def paths(self) -> List[Tuple[np.ndarray, float]]:
        return [(nodes, float(w)) for nodes, w in zip(self.nodes, self.weights)]

    @property
    def velocities(self) -> np.ndarray:
        """Interval velocities, shape (N, M, d)."""
        return np.diff(self.nodes, axis=1) / self.grid.dt

    def with_nodes(self, nodes: np.ndarray) -> 'PathEnsemble':
        return PathEnsemble(self.grid, nodes, self.weights)

    def endpoint_coupling(self) -> 'EndpointCoupling':
        return EndpointCoupling(self.nodes[:, 0, :], self.nodes[:, -1, :], self.weights)


@dataclass(frozen=True)
class EndpointCoupling:
    """Weighted pairs (x_0, x_T) prescribing who goes where."""
    starts: np.ndarray
    ends: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        starts = _as_points(self.starts, "starts")
        ends = _as_points(self.ends, "ends")
        if starts.shape != ends.shape:
            raise ValidationError(f"starts {starts.shape} and ends {ends.shape} differ")
        w = _normalized_weights(self.weights, "coupling")
        if w.shape[0] != starts.shape[0]:
            raise ValidationError("one weight per endpoint pair is required")
        object.__setattr__(self, 'starts', _frozen(starts))
        object.__setattr__(self, 'ends', _frozen(ends))
        object.__setattr__(self, 'weights', w)

    @classmethod
    def uniform(cls, starts: Any, ends: Any) -> 'EndpointCoupling':
        starts = _as_points(starts, "starts")
        return cls(starts, ends, np.full(starts.shape[0], 1.0 / starts.shape[0]))

    @property
    def pairs(self) -> List[Tuple[Tuple[np.ndarray, np.ndarray], float]]:
        return [((a, b), float(w)) for a, b, w in zip(self.starts, self.ends, self.weights)]

    @property
    def dim(self) -> int:
        return int(self.starts.shape[1])

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])


@dataclass(frozen=True)
class VelocityKernel:
    """
    Finitely supported Markov kernel in velocity, one target distribution per
    atom of `source`.
    """
    source: DiscreteStatistic
    targets: Tuple[np.ndarray, ...]
    probabilities: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.targets) != self.source.size or len(self.probabilities) != self.source.size:
            raise ValidationError(
                f"kernel has {len(self.targets)} rows for {self.source.size} source atoms")
        targets, probabilities = [], []
        for k, (vs, ps) in enumerate(zip(self.targets, self.probabilities)):
            vs = _as_points(vs, f"kernel targets of atom {k}")
            if vs.shape[1] != self.source.dim:
                raise ValidationError(f"kernel targets of atom {k} have wrong dimension")
            ps = _normalized_weights(ps, f"kernel row {k}")
            if ps.shape[0] != vs.shape[0]:
                raise ValidationError(f"kernel row {k} needs one probability per target")
            targets.append(_frozen(vs))
            probabilities.append(ps)
        object.__setattr__(self, 'targets', tuple(targets))
        object.__setattr__(self, 'probabilities', tuple(probabilities))

    def means(self) -> np.ndarray:
        """Per-atom mean of the target distribution, shape (K, d)."""
        return np.stack([p @ vs for vs, p in zip(self.targets, self.probabilities)])


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def statistic_at_interval(ens: PathEnsemble, i: int) -> DiscreteStatistic:
    """
    Particle statistics on interval i: atoms (node_i, (node_{i+1} - node_i)/dt)
    carrying the path weights.
    """
    if not (0 <= i < ens.grid.steps):
        raise ValidationError(f"interval index {i} out of range [0, {ens.grid.steps})")
    velocity = (ens.nodes[:, i + 1, :] - ens.nodes[:, i, :]) / ens.grid.dt
    return DiscreteStatistic(ens.nodes[:, i, :], velocity, ens.weights)


def apply_kernel(f: DiscreteStatistic, k: VelocityKernel) -> DiscreteStatistic:
    """Replace each atom (x, v, w) by atoms (x, v'_j, w p_j)."""
    if (k.source.positions.shape != f.positions.shape
            or not np.array_equal(k.source.positions, f.positions)
            or not np.array_equal(k.source.velocities, f.velocities)
            or not np.array_equal(k.source.weights, f.weights)):
        raise ValidationError("kernel source atoms do not match the statistic")
    positions, velocities, weights = [], [], []
    for x, w, vs, ps in zip(f.positions, f.weights, k.targets, k.probabilities):
        positions.append(np.repeat(x[None, :], vs.shape[0], axis=0))
        velocities.append(vs)
        weights.append(w * ps)
    return DiscreteStatistic(np.vstack(positions), np.vstack(velocities),
                             np.concatenate(weights))


def is_martingale(k: VelocityKernel, tol: float = 1e-12) -> bool:
    """True iff every row's mean velocity equals its source velocity within tol."""
    gap = np.abs(k.means() - k.source.velocities)
    return bool(np.all(gap <= tol))


def moment(f: DiscreteStatistic, order: float = 2.0, positional: bool = False) -> float:
    """Sum_k w_k |v_k|^order, or |x_k|^order when `positional` is set."""
    if order < 1:
        raise ValidationError(f"moment order must be >= 1, got {order}")
    values = f.positions if positional else f.velocities
    return float(f.weights @ np.linalg.norm(values, axis=1) ** order)


def identity_kernel(f: DiscreteStatistic) -> VelocityKernel:
    return VelocityKernel(
        source=f,
        targets=tuple(v[None, :] for v in f.velocities),
        probabilities=tuple(np.ones(1) for _ in range(f.size)),
    )


def straight_line_ensemble(coupling: EndpointCoupling, grid: TimeGrid) -> PathEnsemble:
    """Constant-velocity paths between coupled endpoints."""
    s = np.linspace(0.0, 1.0, grid.steps + 1)[None, :, None]
    nodes = coupling.starts[:, None, :] * (1.0 - s) + coupling.ends[:, None, :] * s
    # endpoints are copied, never interpolated
    nodes[:, 0, :] = coupling.starts
    nodes[:, -1, :] = coupling.ends
    return PathEnsemble(grid, nodes, coupling.weights)


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """
    Counter-based generator for a named stream.

    The same (seed, stream) always yields the same sequence, independently of
    which other streams were drawn before.
    """
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(stream.encode('utf-8'))])
    return np.random.Generator(np.random.Philox(key))


def empirical_coupling(sampler: Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]],
                       n: int, rng: np.random.Generator) -> EndpointCoupling:
    """Draw an n-point uniform empirical coupling from `sampler(rng, n)`."""
    if n < 1:
        raise ValidationError(f"empirical coupling needs n >= 1, got {n}")
    starts, ends = sampler(rng, n)
    return EndpointCoupling.uniform(starts, ends)


def quantize_1d(centers: Sequence[float], masses: Sequence[float], n: int) -> np.ndarray:
    """
    n equal-mass atoms for a 1-D cell histogram.

    Mass is spread uniformly over each cell; atom j sits at the quantile
    (j + 1/2) / n of the resulting piecewise-linear distribution function.
    """
    centers = np.asarray(centers, dtype=float)
    masses = np.asarray(masses, dtype=float)
    if centers.shape != masses.shape or centers.ndim != 1:
        raise ValidationError("centers and masses must be matching 1-D arrays")
    if np.any(masses < 0) or masses.sum() <= 0:
        raise ValidationError("cell masses must be nonnegative with positive total")
    if n < 1:
        raise ValidationError(f"quantization needs n >= 1, got {n}")
    width = float(np.min(np.diff(centers))) if centers.size > 1 else 1.0
    shares = masses / masses.sum()
    cdf = np.cumsum(shares)
    levels = (np.arange(n) + 0.5) / n
    # first cell whose cumulative mass passes the level; it always has positive mass
    last = int(np.flatnonzero(shares)[-1])
    cells = np.minimum(np.searchsorted(cdf, levels, side='right'), last)
    below = cdf[cells] - shares[cells]
    return centers[cells] - width / 2 + width * (levels - below) / shares[cells]
