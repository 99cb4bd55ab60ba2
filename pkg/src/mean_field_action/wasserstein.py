"""
Exact Wasserstein distances between small discrete phase-space measures

The transportation problem is solved with POT's network simplex (`ot.emd`),
which is exact and deterministic for the atom counts used here.
"""

import itertools
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import ot
import structlog

from .core import DiscreteStatistic, NumericalError, ValidationError

logger = structlog.get_logger(__name__)

METRICS = ('phase', 'position_only')
BRUTEFORCE_LIMIT = 8
MARGINAL_TOL = 1e-9


@dataclass(frozen=True)
class TransportPlan:
    """Joint weights between the atoms of two statistics and the optimal cost."""
    weights: np.ndarray
    cost: float

    def marginal_gap(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(max(np.abs(self.weights.sum(axis=1) - a).max(),
                         np.abs(self.weights.sum(axis=0) - b).max()))


def cost_matrix(f: DiscreteStatistic, g: DiscreteStatistic, p: float = 2,
                metric: str = 'phase') -> np.ndarray:
    """|x - x'|^p + |v - v'|^p for every atom pair (position term only for position_only)."""
    if f.dim != g.dim:
        raise ValidationError(f"dimension mismatch: {f.dim} vs {g.dim}")
    if metric not in METRICS:
        raise ValidationError(f"unknown metric '{metric}', expected one of {METRICS}")
    cost = np.linalg.norm(f.positions[:, None, :] - g.positions[None, :, :], axis=2) ** p
    if metric == 'phase':
        cost = cost + np.linalg.norm(f.velocities[:, None, :] - g.velocities[None, :, :], axis=2) ** p
    return cost


def wp(f: DiscreteStatistic, g: DiscreteStatistic, p: float = 2,
       metric: str = 'phase') -> Tuple[float, TransportPlan]:
    """
    W_p distance between two statistics.

    Args:
        f, g: Statistics of the same dimension
        p: 1 or 2
        metric: 'phase' or 'position_only'

    Returns:
        (W_p, optimal plan); the plan's cost is the p-th power of W_p
    """
    if p not in (1, 2):
        raise ValidationError(f"p must be 1 or 2, got {p}")
    cost = cost_matrix(f, g, p, metric)
    plan = ot.emd(np.asarray(f.weights), np.asarray(g.weights), cost)
    transport = TransportPlan(weights=plan, cost=float(np.sum(plan * cost)))
    gap = transport.marginal_gap(f.weights, g.weights)
    if gap > MARGINAL_TOL:
        raise NumericalError("transport plan violates its marginals", {'gap': gap})
    return max(transport.cost, 0.0) ** (1.0 / p), transport


def wp_bruteforce_equalweight(f: DiscreteStatistic, g: DiscreteStatistic, p: float = 2,
                              metric: str = 'phase') -> float:
    """Minimum over all assignments; uniform weights and at most eight atoms each."""
    n = f.size
    if g.size != n:
        raise ValidationError("brute force needs equal atom counts")
    if n > BRUTEFORCE_LIMIT:
        raise ValidationError(f"brute force is limited to {BRUTEFORCE_LIMIT} atoms, got {n}")
    uniform = np.full(n, 1.0 / n)
    if not (np.allclose(f.weights, uniform, atol=1e-12) and np.allclose(g.weights, uniform, atol=1e-12)):
        raise ValidationError("brute force needs uniform weights")
    cost = cost_matrix(f, g, p, metric)
    rows = np.arange(n)
    best = min(float(np.sum(cost[rows, list(perm)]) / n)
               for perm in itertools.permutations(range(n)))
    return best ** (1.0 / p)


def w1_sup(series_a, series_b, metric: str = 'phase') -> float:
    """Largest W_1 between matching entries of two statistic sequences."""
    return max(wp(a, b, p=1, metric=metric)[0] for a, b in zip(series_a, series_b))
