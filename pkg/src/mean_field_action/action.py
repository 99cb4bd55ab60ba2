"""
Discretized interaction action F(P) = sum_i dt * Phi(statistic on interval i)

Phi(f) = <f, psi> + 1/2 <f, U * f>, with the self-interaction j = k kept in the
double sum. Positions are taken at the left node of each interval.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import structlog

from .core import DiscreteStatistic, PathEnsemble, ValidationError
from .potentials import PotentialSpec, pair_form

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class ActionValue:
    """Total action with its per-interval contributions dt * Phi(f_i)."""
    total: float
    per_interval: np.ndarray
    kinetic: float
    interaction: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'total': self.total,
            'per_interval': self.per_interval.tolist(),
            'kinetic': self.kinetic,
            'interaction': self.interaction,
        }


def _check_specs(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                 d: int) -> Tuple[PotentialSpec, PotentialSpec]:
    psi, U = pair_form(spec_psi, spec_U)
    psi.check_dim(d)
    U.check_dim(d)
    return psi, U


def phase_points(ens: PathEnsemble) -> np.ndarray:
    """Left-node phase points of every interval, shape (N, M, 2d)."""
    return _nodes_phase_points(ens.nodes, ens.grid.dt)


def _nodes_phase_points(nodes: np.ndarray, dt: float) -> np.ndarray:
    return np.concatenate([nodes[:, :-1, :], np.diff(nodes, axis=1) / dt], axis=2)


def _pair_differences(z: np.ndarray) -> np.ndarray:
    """z_j - z_k for all path pairs, shape (N, N, ...)."""
    return z[:, None, ...] - z[None, :, ...]


def _interval_phi(z: np.ndarray, w: np.ndarray, psi: PotentialSpec,
                  U: PotentialSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Kinetic <f_i, psi> and interaction 1/2 <f_i, U * f_i> for each interval."""
    N, M, D = z.shape
    kinetic = w @ psi.value_z(z.reshape(-1, D)).reshape(N, M)
    if U.is_zero():
        return kinetic, np.zeros(M)
    u = U.value_z(_pair_differences(z).reshape(-1, D)).reshape(N, N, M)
    return kinetic, 0.5 * np.einsum('j,k,jki->i', w, w, u)


def phi(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec], f: DiscreteStatistic) -> float:
    """
    Phi(f) = <f, psi> + 1/2 sum_jk w_j w_k U(x_j - x_k, v_j - v_k).

    For variance_penalty the value is <f, phi + |v|^2> - |<f, v>|^2, plus the
    interaction of any U passed alongside.
    """
    if spec_psi.kind == 'variance_penalty':
        spec_psi.check_dim(f.dim)
        mean = f.mean_velocity()
        value = float(f.weights @ spec_psi.value_z(np.hstack([f.positions, f.velocities])))
        value -= float(mean @ mean)
        if spec_U is not None and not spec_U.is_zero():
            value += phi(PotentialSpec('zero'), spec_U, f)
        return value
    psi, U = _check_specs(spec_psi, spec_U, f.dim)
    z = np.hstack([f.positions, f.velocities])[:, None, :]
    kinetic, interaction = _interval_phi(z, f.weights, psi, U)
    return float(kinetic[0] + interaction[0])


def action(ens: PathEnsemble, spec_psi: PotentialSpec,
           spec_U: Optional[PotentialSpec] = None) -> ActionValue:
    """Riemann sum of Phi over the ensemble's intervals."""
    psi, U = _check_specs(spec_psi, spec_U, ens.dim)
    dt = ens.grid.dt
    kinetic, interaction = _interval_phi(phase_points(ens), ens.weights, psi, U)
    per_interval = dt * (kinetic + interaction)
    return ActionValue(
        total=float(per_interval.sum()),
        per_interval=per_interval,
        kinetic=float(dt * kinetic.sum()),
        interaction=float(dt * interaction.sum()),
    )


def _phase_gradients(z: np.ndarray, w: np.ndarray, psi: PotentialSpec,
                     U: PotentialSpec) -> np.ndarray:
    """d Phi(f_i) / d z_{k,i} for every path k and interval i, shape (N, M, 2d)."""
    N, M, D = z.shape
    g = psi.grad_z(z.reshape(-1, D)).reshape(N, M, D)
    if not U.is_zero():
        gu = U.grad_z(_pair_differences(z).reshape(-1, D)).reshape(N, N, M, D)
        outgoing = np.einsum('kliD,l->kiD', gu, w)
        incoming = np.einsum('jkiD,j->kiD', gu, w)
        g = g + 0.5 * (outgoing - incoming)
    return w[:, None, None] * g


def _node_gradient(nodes: np.ndarray, dt: float, gz: np.ndarray) -> np.ndarray:
    """Chain rule through v_i = (x_{i+1} - x_i) / dt; shape (N, M+1, d)."""
    d = nodes.shape[2]
    gx, gv = gz[..., :d], gz[..., d:]
    out = np.zeros(nodes.shape)
    out[:, :-1, :] += dt * gx - gv
    out[:, 1:, :] += gv
    return out


def smooth_pair(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                d: int) -> Tuple[PotentialSpec, PotentialSpec]:
    """Pair form of (psi, U), rejecting kinds without derivatives."""
    psi, U = _check_specs(spec_psi, spec_U, d)
    if not (psi.is_smooth() and U.is_smooth()):
        raise ValidationError("action gradient needs smooth potential kinds",
                              {'psi': spec_psi.kind, 'U': None if spec_U is None else spec_U.kind})
    return psi, U


def nodes_action_and_gradient(nodes: np.ndarray, weights: np.ndarray, dt: float,
                              psi: PotentialSpec, U: PotentialSpec) -> Tuple[float, np.ndarray]:
    """Unvalidated kernel of action_and_gradient on raw (N, M+1, d) node arrays."""
    z = _nodes_phase_points(nodes, dt)
    kinetic, interaction = _interval_phi(z, weights, psi, U)
    total = float(dt * (kinetic + interaction).sum())
    return total, _node_gradient(nodes, dt, _phase_gradients(z, weights, psi, U))


def action_and_gradient(ens: PathEnsemble, spec_psi: PotentialSpec,
                        spec_U: Optional[PotentialSpec] = None) -> Tuple[float, np.ndarray]:
    """Total action and the gradient with respect to every node."""
    psi, U = smooth_pair(spec_psi, spec_U, ens.dim)
    return nodes_action_and_gradient(ens.nodes, ens.weights, ens.grid.dt, psi, U)


def action_gradient(ens: PathEnsemble, spec_psi: PotentialSpec,
                    spec_U: Optional[PotentialSpec] = None) -> np.ndarray:
    """
    Exact gradient of the discrete action with respect to the path nodes.

    Returns an (N, M+1, d) array. Rows 0 and M hold the endpoint derivatives,
    which the optimizer never uses; the interior rows are the gradient with
    endpoints held fixed.
    """
    return action_and_gradient(ens, spec_psi, spec_U)[1]


def lagrangian_gradients(ens: PathEnsemble, spec_psi: PotentialSpec,
                         spec_U: Optional[PotentialSpec] = None) -> np.ndarray:
    """grad L[f_i](x_{k,i}, v_{k,i}) for every path and interval, shape (N, M, 2d)."""
    psi, U = smooth_pair(spec_psi, spec_U, ens.dim)
    z = phase_points(ens)
    N, M, D = z.shape
    g = psi.grad_z(z.reshape(-1, D)).reshape(N, M, D)
    if not U.is_zero():
        gu = U.grad_z(_pair_differences(z).reshape(-1, D)).reshape(N, N, M, D)
        g = g + np.einsum('kliD,l->kiD', gu, ens.weights)
    return g
