"""
Generalized Vlasov equation by characteristics

The mean-field Cauchy problem is solved by Picard (Dobrushin) iteration: the
particle statistics are frozen from the previous iterate, every atom follows
the Hamiltonian characteristic system

    dx/dt = v,   dp/dt = grad_x L[f_t](x, v),   p = grad_v L[f_t](x, v),

integrated by fixed-step RK4 in (x, p), and the statistics are refreshed until
successive iterates agree in sup-t W_1. Every RK4 stage is evaluated against
the same stage of the previous iterate, so at the fixed point each stage sees
the pairwise-antisymmetric N-atom system and momentum is conserved up to the
fixed-point tolerance. Time windows are halved until the observed contraction
factor drops below one half.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import linalg
from scipy.optimize import brentq

from .action import smooth_pair
from .core import DiscreteStatistic, NumericalError, TimeGrid, ValidationError, make_rng
from .potentials import PotentialSpec
from .wasserstein import wp

logger = structlog.get_logger(__name__)

CONTRACTION_LIMIT = 0.5
SINGULAR_TOL = 1e-12


def _lagrangian_grad(psi: PotentialSpec, U: PotentialSpec, z: np.ndarray,
                     atoms: np.ndarray, w: np.ndarray) -> np.ndarray:
    g = psi.grad_z(z)
    if not U.is_zero():
        K, D = z.shape
        gu = U.grad_z((z[:, None, :] - atoms[None, :, :]).reshape(-1, D)).reshape(K, -1, D)
        g = g + np.einsum('kjD,j->kD', gu, w)
    return g


def _lagrangian_hess(psi: PotentialSpec, U: PotentialSpec, z: np.ndarray,
                     atoms: np.ndarray, w: np.ndarray) -> np.ndarray:
    h = psi.hess_z(z)
    if not U.is_zero():
        K, D = z.shape
        hu = U.hess_z((z[:, None, :] - atoms[None, :, :]).reshape(-1, D)).reshape(K, -1, D, D)
        h = h + np.einsum('kjab,j->kab', hu, w)
    return h


@dataclass(frozen=True)
class AccelerationField:
    """Per-atom accelerations A[f](x_k, v_k) with the linear solve diagnostics."""
    statistic: DiscreteStatistic
    accelerations: np.ndarray
    residual: float
    min_singular_value: float


def acceleration(f: DiscreteStatistic, spec_psi: PotentialSpec,
                 spec_U: Optional[PotentialSpec] = None) -> AccelerationField:
    """
    Solve the implicit acceleration system over all atoms.

    Row block k reads
        L_vv(z_k) a_k - sum_j w_j U_vv(z_k - z_j) a_j
            = L_x(z_k) - L_xv(z_k)^T v_k + sum_j w_j U_xv(z_k - z_j)^T v_j
    with L = L[f]; the j = k terms cancel on both sides.
    """
    psi, U = smooth_pair(spec_psi, spec_U, f.dim)
    K, d = f.size, f.dim
    atoms = np.hstack([f.positions, f.velocities])
    w = f.weights
    h_l = _lagrangian_hess(psi, U, atoms, atoms, w)
    curvature = float(np.linalg.eigvalsh(h_l[:, d:, d:]).min())
    if curvature <= 0:
        raise ValidationError("grad_v grad_v L[f] is not positive definite at the atoms",
                              {'min_eigenvalue': curvature})
    g_l = _lagrangian_grad(psi, U, atoms, atoms, w)

    matrix = np.zeros((K * d, K * d))
    rhs = g_l[:, :d] - np.einsum('kab,ka->kb', h_l[:, :d, d:], f.velocities)
    for k in range(K):
        matrix[k * d:(k + 1) * d, k * d:(k + 1) * d] = h_l[k, d:, d:]
    if not U.is_zero():
        D = 2 * d
        hu = U.hess_z((atoms[:, None, :] - atoms[None, :, :]).reshape(-1, D)).reshape(K, K, D, D)
        coupling = hu[:, :, d:, d:] * w[None, :, None, None]
        matrix -= coupling.transpose(0, 2, 1, 3).reshape(K * d, K * d)
        rhs = rhs + np.einsum('kjab,j,ja->kb', hu[:, :, :d, d:], w, f.velocities)

    singular = linalg.svdvals(matrix)
    smallest = float(singular.min())
    if smallest <= SINGULAR_TOL * max(1.0, float(singular.max())):
        raise NumericalError("acceleration system is singular", {'min_singular_value': smallest})
    solution = linalg.solve(matrix, rhs.ravel())
    residual = float(np.abs(matrix @ solution - rhs.ravel()).max())
    return AccelerationField(statistic=f, accelerations=solution.reshape(K, d),
                             residual=residual, min_singular_value=smallest)


# ---------------------------------------------------------------------------
# Characteristics
# ---------------------------------------------------------------------------

@dataclass
class PicardWindow:
    start: int
    end: int
    iterations: int
    contraction: float

    def to_dict(self) -> Dict[str, Any]:
        return {'start': self.start, 'end': self.end, 'iterations': self.iterations,
                'contraction': self.contraction}


@dataclass
class CharacteristicFlow:
    """
    Atom trajectories on the grid nodes: positions, momenta and recovered
    velocities, each of shape (M+1, K, d).
    """
    initial: DiscreteStatistic
    grid: TimeGrid
    positions: np.ndarray
    momenta: np.ndarray
    velocities: np.ndarray
    spec_psi: PotentialSpec
    spec_U: Optional[PotentialSpec]
    windows: List[PicardWindow] = field(default_factory=list)
    recovery_residual: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return self.initial.weights

    @property
    def picard_iterations(self) -> int:
        return sum(w.iterations for w in self.windows)

    @property
    def max_contraction(self) -> float:
        return max((w.contraction for w in self.windows), default=0.0)

    def summary(self) -> Dict[str, Any]:
        return {
            'atoms': self.initial.size,
            'steps': self.grid.steps,
            'horizon': self.grid.T,
            'picard_iterations': self.picard_iterations,
            'max_contraction': self.max_contraction,
            'windows': [w.to_dict() for w in self.windows],
            'recovery_residual': self.recovery_residual,
        }


def flow_statistic(flow: CharacteristicFlow, i: int) -> DiscreteStatistic:
    """Phase-space statistic f_{t_i} carried by the flow at node i."""
    if not (0 <= i <= flow.grid.steps):
        raise ValidationError(f"node index {i} out of range [0, {flow.grid.steps}]")
    return DiscreteStatistic(flow.positions[i], flow.velocities[i], flow.weights)


def total_momentum(flow: CharacteristicFlow) -> np.ndarray:
    """sum_k w_k grad_v psi(x_k, v_k) at every node, shape (M+1, d)."""
    M1, K, d = flow.positions.shape
    z = np.concatenate([flow.positions, flow.velocities], axis=2).reshape(-1, 2 * d)
    gv = flow.spec_psi.grad_z(z)[:, d:].reshape(M1, K, d)
    return np.einsum('k,ikd->id', flow.weights, gv)


class _Characteristics:
    """RK4 in (x, p) against frozen statistics."""

    def __init__(self, psi: PotentialSpec, U: PotentialSpec, weights: np.ndarray,
                 dt: float, newton_tol: float, newton_max: int = 50):
        self.psi, self.U, self.w = psi, U, weights
        self.dt = dt
        self.newton_tol = newton_tol
        self.newton_max = newton_max

    def recover_velocity(self, x: np.ndarray, p: np.ndarray, frozen: np.ndarray,
                         guess: np.ndarray) -> np.ndarray:
        """Newton on grad_v L[f](x, v) = p, one small system per atom."""
        d = x.shape[1]
        v = guess.copy()
        for _ in range(self.newton_max):
            z = np.hstack([x, v])
            gap = _lagrangian_grad(self.psi, self.U, z, frozen, self.w)[:, d:] - p
            if np.abs(gap).max() < self.newton_tol:
                return v
            h = _lagrangian_hess(self.psi, self.U, z, frozen, self.w)[:, d:, d:]
            v = v - np.linalg.solve(h, gap[..., None])[..., 0]
        raise NumericalError("velocity recovery did not converge",
                             {'residual': float(np.abs(gap).max())})

    def rhs(self, x: np.ndarray, p: np.ndarray, frozen: np.ndarray,
            guess: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d = x.shape[1]
        v = self.recover_velocity(x, p, frozen, guess)
        g = _lagrangian_grad(self.psi, self.U, np.hstack([x, v]), frozen, self.w)
        return v, g[:, :d]

    def integrate(self, x0: np.ndarray, p0: np.ndarray, v0: np.ndarray,
                  nodes: np.ndarray, stages: np.ndarray) -> Tuple[np.ndarray, ...]:
        """
        One Picard sweep over a window.

        `nodes` (n+1, K, 2d) and `stages` (n, 4, K, 2d) are the phase points
        of the previous iterate; the sweep returns its own in the same layout.
        """
        h = self.dt
        n = stages.shape[0]
        X, P, V, Z = [x0], [p0], [v0], []
        x, p, v = x0, p0, v0
        for j in range(n):
            frozen = stages[j]
            dx1, dp1 = self.rhs(x, p, frozen[0], v)
            x2, p2 = x + 0.5 * h * dx1, p + 0.5 * h * dp1
            dx2, dp2 = self.rhs(x2, p2, frozen[1], dx1)
            x3, p3 = x + 0.5 * h * dx2, p + 0.5 * h * dp2
            dx3, dp3 = self.rhs(x3, p3, frozen[2], dx2)
            x4, p4 = x + h * dx3, p + h * dp3
            dx4, dp4 = self.rhs(x4, p4, frozen[3], dx3)
            Z.append(np.stack([np.hstack([x, dx1]), np.hstack([x2, dx2]),
                               np.hstack([x3, dx3]), np.hstack([x4, dx4])]))
            x = x + h / 6.0 * (dx1 + 2 * dx2 + 2 * dx3 + dx4)
            p = p + h / 6.0 * (dp1 + 2 * dp2 + 2 * dp3 + dp4)
            v = self.recover_velocity(x, p, nodes[j + 1], dx4)
            X.append(x)
            P.append(p)
            V.append(v)
        return np.stack(X), np.stack(P), np.stack(V), np.stack(Z)


def _sup_w1(xa: np.ndarray, va: np.ndarray, xb: np.ndarray, vb: np.ndarray,
            w: np.ndarray) -> float:
    best = 0.0
    for j in range(1, xa.shape[0]):
        a = DiscreteStatistic(xa[j], va[j], w)
        b = DiscreteStatistic(xb[j], vb[j], w)
        best = max(best, wp(a, b, p=1)[0])
    return best


def dobrushin_solve(f0: DiscreteStatistic, grid: TimeGrid, spec_psi: PotentialSpec,
                    spec_U: Optional[PotentialSpec] = None, fptol: float = 1e-10,
                    max_picard: int = 60, newton_tol: float = 1e-12) -> CharacteristicFlow:
    """
    Characteristic flow of the generalized Vlasov equation from f0.

    Args:
        f0: Initial atoms (positions and velocities)
        grid: Time grid; RK4 takes one step per interval
        fptol: Stop a window once sup-t W_1 between Picard iterates is below this
        max_picard: Iteration cap per window
        newton_tol: Tolerance of the velocity recovery

    Raises:
        NumericalError: Picard or Newton failure
    """
    psi, U = smooth_pair(spec_psi, spec_U, f0.dim)
    atoms = np.hstack([f0.positions, f0.velocities])
    curvature = float(np.linalg.eigvalsh(
        _lagrangian_hess(psi, U, atoms, atoms, f0.weights)[:, f0.dim:, f0.dim:]).min())
    if curvature <= 0:
        raise ValidationError("grad_v grad_v L[f0] is not positive definite",
                              {'min_eigenvalue': curvature})
    M, K, d = grid.steps, f0.size, f0.dim
    w = f0.weights
    chars = _Characteristics(psi, U, w, grid.dt, newton_tol)
    X = np.zeros((M + 1, K, d))
    P = np.zeros((M + 1, K, d))
    V = np.zeros((M + 1, K, d))
    X[0], V[0] = f0.positions, f0.velocities
    P[0] = _lagrangian_grad(psi, U, atoms, atoms, w)[:, d:]

    logger.info("dobrushin_start", atoms=K, steps=M, horizon=grid.T, psi=spec_psi.kind,
                U=None if spec_U is None else spec_U.kind)
    windows: List[PicardWindow] = []
    start, span = 0, M
    while start < M:
        end = min(start + span, M)
        outcome = _picard_window(chars, X[start], P[start], V[start], end - start,
                                 fptol, max_picard, w)
        if outcome is None:
            span = max(1, span // 2)
            logger.info("picard_window_halved", start=start, span=span)
            continue
        Xw, Pw, Vw, iterations, contraction = outcome
        X[start:end + 1], P[start:end + 1], V[start:end + 1] = Xw, Pw, Vw
        windows.append(PicardWindow(start, end, iterations, contraction))
        start = end

    recovery = 0.0
    for i in range(M + 1):
        z = np.hstack([X[i], V[i]])
        gap = _lagrangian_grad(psi, U, z, z, w)[:, d:] - P[i]
        recovery = max(recovery, float(np.abs(gap).max()))
    flow = CharacteristicFlow(initial=f0, grid=grid, positions=X, momenta=P, velocities=V,
                              spec_psi=spec_psi, spec_U=spec_U, windows=windows,
                              recovery_residual=recovery)
    logger.info("dobrushin_finished", windows=len(windows), iterations=flow.picard_iterations,
                max_contraction=flow.max_contraction, recovery_residual=recovery)
    return flow


def _picard_window(chars: _Characteristics, x0: np.ndarray, p0: np.ndarray, v0: np.ndarray,
                   n: int, fptol: float, max_picard: int, w: np.ndarray):
    d = x0.shape[1]
    h = chars.dt
    steps = np.arange(n + 1)[:, None, None] * h
    guess_x = x0[None] + steps * v0[None]
    guess_v = np.repeat(v0[None], n + 1, axis=0)
    nodes = np.concatenate([guess_x, guess_v], axis=2)
    # free-transport stages: node, two midpoints, next node
    offsets = np.array([0.0, 0.5, 0.5, 1.0])[None, :, None, None] * h
    stages = np.repeat(nodes[:-1, None], 4, axis=1)
    stages[..., :d] = stages[..., :d] + offsets * v0[None, None]
    previous = None
    contraction = 0.0
    for iteration in range(1, max_picard + 1):
        X, P, V, Z = chars.integrate(x0, p0, v0, nodes, stages)
        distance = _sup_w1(X, V, nodes[..., :d], nodes[..., d:], w)
        if distance < fptol:
            return X, P, V, iteration, contraction
        if previous is not None and previous > 0:
            factor = distance / previous
            contraction = max(contraction, factor)
            if factor >= CONTRACTION_LIMIT and n > 1:
                return None
        previous = distance
        nodes, stages = np.concatenate([X, V], axis=2), Z
    raise NumericalError("Picard iteration did not converge",
                         {'last_contraction': contraction, 'distance': previous, 'window': n})


# ---------------------------------------------------------------------------
# Weak residual and stability
# ---------------------------------------------------------------------------

def _bump(s: np.ndarray, center: float, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """exp(-1 / (1 - u^2)) on |u| < 1 with u = (s - c) / r, and its derivative."""
    u = (s - center) / radius
    inside = np.abs(u) < 1
    value = np.zeros_like(u)
    slope = np.zeros_like(u)
    q = 1.0 - u[inside] ** 2
    value[inside] = np.exp(-1.0 / q)
    slope[inside] = value[inside] * (-2.0 * u[inside] / q ** 2) / radius
    return value, slope


@dataclass(frozen=True)
class BumpFunction:
    """Product of one-dimensional compact bumps in t, each x_i and each v_i."""
    t_center: float
    t_radius: float
    x_center: np.ndarray
    x_radius: float
    v_center: np.ndarray
    v_radius: float
    amplitude: float = 1.0
    constant: bool = False

    def evaluate(self, t: float, x: np.ndarray, v: np.ndarray):
        """(phi, d_t phi, grad_x phi, grad_v phi) at the atoms (x, v) of shape (K, d)."""
        K, d = x.shape
        if self.constant:
            return (np.full(K, self.amplitude), np.zeros(K), np.zeros((K, d)), np.zeros((K, d)))
        bt, dbt = _bump(np.array([t]), self.t_center, self.t_radius)
        factors, slopes = [], []
        for block, center, radius in ((x, self.x_center, self.x_radius),
                                      (v, self.v_center, self.v_radius)):
            for i in range(d):
                b, db = _bump(block[:, i], center[i], radius)
                factors.append(b)
                slopes.append(db)
        factors = np.stack(factors, axis=1)
        slopes = np.stack(slopes, axis=1)
        space = np.prod(factors, axis=1)
        grads = np.zeros((K, 2 * d))
        for i in range(2 * d):
            grads[:, i] = slopes[:, i] * np.prod(np.delete(factors, i, axis=1), axis=1)
        a = self.amplitude
        return (a * bt[0] * space, a * dbt[0] * space,
                a * bt[0] * grads[:, :d], a * bt[0] * grads[:, d:])


def bump_family(flow: CharacteristicFlow, count: int = 8, seed: int = 0) -> List[BumpFunction]:
    """
    Deterministic smooth compact test functions centred on the flow's support,
    vanishing at t = 0 and t = T.
    """
    rng = make_rng(seed, 'bump_family')
    T = flow.grid.T
    spread_x = float(np.ptp(flow.positions)) if flow.positions.size else 0.0
    spread_v = float(np.ptp(flow.velocities)) if flow.velocities.size else 0.0
    bumps = []
    for _ in range(count):
        i = int(rng.integers(0, flow.grid.steps + 1))
        k = int(rng.integers(0, flow.initial.size))
        t_center = float(rng.uniform(0.35, 0.65)) * T
        bumps.append(BumpFunction(
            t_center=t_center,
            t_radius=min(t_center, T - t_center) * 0.95,
            x_center=flow.positions[i, k].copy(),
            x_radius=0.5 + spread_x,
            v_center=flow.velocities[i, k].copy(),
            v_radius=0.5 + spread_v,
        ))
    return bumps


def weak_vlasov_residual(flow: CharacteristicFlow,
                         test_functions: Optional[Sequence[BumpFunction]] = None) -> float:
    """
    max over test functions of |int <f_t, d_t phi + v . grad_x phi + A[f_t] . grad_v phi> dt|
    by the trapezoid rule on the grid nodes.
    """
    test_functions = list(test_functions) if test_functions is not None else bump_family(flow)
    M = flow.grid.steps
    quadrature = np.full(M + 1, flow.grid.dt)
    quadrature[[0, -1]] *= 0.5
    accelerations = [acceleration(flow_statistic(flow, i), flow.spec_psi, flow.spec_U).accelerations
                     for i in range(M + 1)]
    worst = 0.0
    for bump in test_functions:
        total = 0.0
        for i, t in enumerate(flow.grid.times):
            x, v = flow.positions[i], flow.velocities[i]
            _, dt_phi, gx, gv = bump.evaluate(float(t), x, v)
            integrand = dt_phi + np.sum(v * gx, axis=1) + np.sum(accelerations[i] * gv, axis=1)
            total += quadrature[i] * float(flow.weights @ integrand)
        worst = max(worst, abs(total))
    return worst


@dataclass
class StabilityReport:
    """W_1(f_t, g_t) / W_1(f_0, g_0) along the grid with the fitted envelope C e^{Ct}."""
    times: np.ndarray
    ratios: np.ndarray
    rate: float
    envelope: np.ndarray
    passed: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            'times': self.times.tolist(),
            'ratios': self.ratios.tolist(),
            'rate': self.rate,
            'envelope': self.envelope.tolist(),
            'passed': self.passed,
        }


def gronwall_rate(times: np.ndarray, ratios: np.ndarray) -> float:
    """Smallest C >= 1 with ratio(t) <= C e^{C t} at every sampled time."""
    rate = 1.0
    for t, r in zip(times, ratios):
        if r <= rate * np.exp(rate * t):
            continue
        target = np.log(r)
        upper = max(2.0, r)
        while np.log(upper) + upper * t < target:
            upper *= 2.0
        rate = brentq(lambda c: np.log(c) + c * t - target, rate, upper, xtol=1e-12)
    return float(rate)


def stability_experiment(f0: DiscreteStatistic, g0: DiscreteStatistic, grid: TimeGrid,
                         spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec] = None,
                         rate: Optional[float] = None, fptol: float = 1e-10,
                         max_picard: int = 60) -> StabilityReport:
    """
    Compare two flows started from f0 and g0.

    With `rate` given the envelope C e^{Ct} uses it and `passed` reports whether
    the ratios stay below it; otherwise C is fitted as the smallest constant
    that bounds the sampled ratios.
    """
    if f0.size != g0.size:
        raise ValidationError("stability runs need matching atom counts")
    base = wp(f0, g0, p=1)[0]
    times = grid.times
    if base == 0:
        ratios = np.ones(grid.steps + 1)
    else:
        flow_f = dobrushin_solve(f0, grid, spec_psi, spec_U, fptol, max_picard)
        flow_g = dobrushin_solve(g0, grid, spec_psi, spec_U, fptol, max_picard)
        ratios = np.array([wp(flow_statistic(flow_f, i), flow_statistic(flow_g, i), p=1)[0] / base
                           for i in range(grid.steps + 1)])
    fitted = gronwall_rate(times, ratios) if rate is None else float(rate)
    envelope = fitted * np.exp(fitted * times)
    passed = bool(np.all(ratios <= envelope * (1 + 1e-9)))
    if not passed:
        logger.warning("stability_envelope_exceeded", rate=fitted,
                       worst=float(np.max(ratios / envelope)))
    return StabilityReport(times=times, ratios=ratios, rate=fitted, envelope=envelope,
                           passed=passed)
