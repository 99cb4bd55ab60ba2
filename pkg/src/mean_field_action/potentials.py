"""
Potential catalog for the kinetic term psi(x, v) and the pair interaction U(x, v)

Every smooth kind compiles to a sum of poly-Gaussian terms

    coef * prod_i z_i ** a_i * exp(-z^T Q z),   z = (x, v),

so all smooth kinds share one closed-form gradient and Hessian. The two-well
kinds are piecewise linear in a scalar velocity and report the right-limit
derivative at kinks.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from .core import DiscreteStatistic, ValidationError, make_rng

logger = structlog.get_logger(__name__)

KIND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    'zero': {},
    'quadratic_kinetic': {'scale': 0.5},
    'velocity_quadratic': {'alpha': 1.0},
    'quadratic_position': {'kappa': 1.0},
    'gaussian_congestion': {'amplitude': 1.0},
    'flocking': {'kappa': 50.0, 'c': 10.0},
    'quartic_well': {},
    'two_well': {'scale': 1.0, 'wells': (-1.0, 1.0)},
    'two_well_interaction': {'alpha': 2.0, 'wells': (-4.0, 0.0, 4.0)},
    'variance_penalty': {'confinement': 0.0},
    'custom': {'terms': ()},
    'sum': {'parts': ()},
}

WELL_KINDS = frozenset({'two_well', 'two_well_interaction'})

Arrays = Tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class PolyGaussTerm:
    """coef * prod z_i^powers_i * exp(-z^T quad z) over z = (x, v)."""
    coef: float
    powers: Tuple[int, ...]
    quad: Optional[np.ndarray] = None

    @property
    def phase_dim(self) -> int:
        return len(self.powers)


def _basis_powers(d: int, index: int, power: int) -> Tuple[int, ...]:
    powers = [0] * (2 * d)
    powers[index] = power
    return tuple(powers)


def _squared_norm_terms(coef: float, d: int, offset: int) -> List[PolyGaussTerm]:
    return [PolyGaussTerm(coef, _basis_powers(d, offset + i, 2)) for i in range(d)]


def _quartic_velocity_terms(quartic: float, quadratic: float, constant: float,
                            d: int) -> List[PolyGaussTerm]:
    """quartic |v|^4 + quadratic |v|^2 + constant."""
    terms = []
    for i in range(d):
        terms.append(PolyGaussTerm(quartic, _basis_powers(d, d + i, 4)))
        for j in range(i + 1, d):
            powers = [0] * (2 * d)
            powers[d + i] = powers[d + j] = 2
            terms.append(PolyGaussTerm(2.0 * quartic, tuple(powers)))
    terms.extend(_squared_norm_terms(quadratic, d, d))
    if constant:
        terms.append(PolyGaussTerm(constant, (0,) * (2 * d)))
    return terms


def _position_gaussian(d: int) -> np.ndarray:
    quad = np.zeros((2 * d, 2 * d))
    quad[:d, :d] = np.eye(d)
    return quad


def _parse_custom_term(entry: Mapping[str, Any], d: int) -> PolyGaussTerm:
    known = {'coef', 'x_powers', 'v_powers', 'x_decay', 'v_decay', 'quad'}
    unknown = set(entry) - known
    if unknown:
        raise ValidationError(f"custom term has unknown fields {sorted(unknown)}")
    x_powers = [int(a) for a in entry.get('x_powers', [0] * d)]
    v_powers = [int(a) for a in entry.get('v_powers', [0] * d)]
    if len(x_powers) != d or len(v_powers) != d or min(x_powers + v_powers) < 0:
        raise ValidationError(f"custom term powers must be {d} nonnegative integers per block")
    if 'quad' in entry:
        quad = np.asarray(entry['quad'], dtype=float)
        if quad.shape != (2 * d, 2 * d):
            raise ValidationError(f"custom term quad must be {2 * d}x{2 * d}")
        quad = 0.5 * (quad + quad.T)
    else:
        quad = np.diag([float(entry.get('x_decay', 0.0))] * d + [float(entry.get('v_decay', 0.0))] * d)
    if np.linalg.eigvalsh(quad).min() < -1e-12:
        raise ValidationError("custom term quad must be positive semidefinite")
    return PolyGaussTerm(float(entry.get('coef', 1.0)), tuple(x_powers + v_powers),
                         quad if np.any(quad) else None)


def _custom_dimension(terms: Sequence[Mapping[str, Any]]) -> Optional[int]:
    for entry in terms:
        for key in ('x_powers', 'v_powers'):
            if key in entry:
                return len(entry[key])
        if 'quad' in entry:
            return len(entry['quad']) // 2
    return None


@dataclass(frozen=True)
class PotentialSpec:
    """
    Catalog entry for psi or U: a kind name plus named parameters.

    Args:
        kind: One of KIND_DEFAULTS
        params: Parameter overrides; unknown names are rejected
    """
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)
    _cache: Dict[int, Tuple[PolyGaussTerm, ...]] = field(
        default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KIND_DEFAULTS:
            raise ValidationError(f"unknown potential kind '{self.kind}'",
                                  {'known': sorted(KIND_DEFAULTS)})
        defaults = KIND_DEFAULTS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown parameters {sorted(unknown)} for kind '{self.kind}'")
        merged = dict(defaults)
        for key, value in self.params.items():
            if key == 'wells':
                merged[key] = tuple(sorted(float(w) for w in value))
            elif key == 'parts':
                merged[key] = tuple(PotentialSpec.from_config(part) for part in value)
            elif key == 'terms':
                merged[key] = tuple(value)
            else:
                merged[key] = float(value)
        if self.kind in WELL_KINDS and not merged['wells']:
            raise ValidationError("two-well kinds need at least one well")
        object.__setattr__(self, 'params', merged)

    @classmethod
    def from_config(cls, entry: Union[None, str, Mapping[str, Any], 'PotentialSpec']) -> 'PotentialSpec':
        """Build from `{"name": ..., "params": {...}}`, a bare kind name or None (zero)."""
        if entry is None:
            return cls('zero')
        if isinstance(entry, PotentialSpec):
            return entry
        if isinstance(entry, str):
            return cls(entry)
        name = entry.get('name', entry.get('kind'))
        if name is None:
            raise ValidationError("potential entry needs a 'name'")
        return cls(str(name), dict(entry.get('params', {})))

    def to_config(self) -> Dict[str, Any]:
        params = {}
        for key, value in self.params.items():
            if key == 'parts':
                params[key] = [part.to_config() for part in value]
            elif isinstance(value, tuple):
                params[key] = list(value)
            else:
                params[key] = value
        return {'name': self.kind, 'params': params}

    # -- structural queries -------------------------------------------------

    def is_smooth(self) -> bool:
        if self.kind == 'sum':
            return all(part.is_smooth() for part in self.params['parts'])
        return self.kind not in WELL_KINDS

    def is_zero(self) -> bool:
        if self.kind == 'sum':
            return all(part.is_zero() for part in self.params['parts'])
        return self.kind == 'zero' or (self.kind == 'custom' and not self.params['terms'])

    def native_dim(self) -> Optional[int]:
        """Dimension fixed by the parameters, if any."""
        if self.kind in WELL_KINDS:
            return 1
        if self.kind == 'custom':
            return _custom_dimension(self.params['terms'])
        if self.kind == 'sum':
            dims = {part.native_dim() for part in self.params['parts']} - {None}
            if len(dims) > 1:
                raise ValidationError(f"summed potentials have mixed dimensions {sorted(dims)}")
            return dims.pop() if dims else None
        return None

    def check_dim(self, d: int) -> None:
        native = self.native_dim()
        if native is not None and native != d:
            raise ValidationError(f"potential '{self.kind}' is defined for d={native}, got d={d}")

    def depends_on_velocity(self) -> bool:
        if self.kind in WELL_KINDS or self.kind == 'variance_penalty':
            return True
        if self.kind == 'sum':
            return any(part.depends_on_velocity() for part in self.params['parts'])
        d = self.native_dim() or 1
        for term in self.terms(d):
            if any(term.powers[d:]):
                return True
            if term.quad is not None and np.any(term.quad[d:, :]):
                return True
        return False

    # -- compilation --------------------------------------------------------

    def terms(self, d: int) -> Tuple[PolyGaussTerm, ...]:
        """Poly-Gaussian terms of a smooth kind in dimension d."""
        if self.kind in WELL_KINDS or self.kind == 'sum':
            raise ValidationError(f"kind '{self.kind}' has no poly-Gaussian form")
        self.check_dim(d)
        if d not in self._cache:
            self._cache[d] = tuple(self._compile(d))
        return self._cache[d]

    def _compile(self, d: int) -> List[PolyGaussTerm]:
        p = self.params
        if self.kind == 'zero':
            return []
        if self.kind == 'quadratic_kinetic':
            return _squared_norm_terms(p['scale'], d, d)
        if self.kind == 'velocity_quadratic':
            return _squared_norm_terms(p['alpha'], d, d)
        if self.kind == 'quadratic_position':
            return _squared_norm_terms(p['kappa'], d, 0)
        if self.kind == 'gaussian_congestion':
            return [PolyGaussTerm(p['amplitude'], (0,) * (2 * d), _position_gaussian(d))]
        if self.kind == 'flocking':
            quad = _position_gaussian(d)
            terms = [PolyGaussTerm(p['kappa'], _basis_powers(d, d + i, 2), quad) for i in range(d)]
            terms.append(PolyGaussTerm(-p['kappa'] * p['c'], (0,) * (2 * d), quad))
            return terms
        if self.kind == 'quartic_well':
            # 1/4 (|v|^2 - 1)^2
            return _quartic_velocity_terms(0.25, -0.5, 0.25, d)
        if self.kind == 'variance_penalty':
            # 1/4 (|v|^2 - 1)^2 + |v|^2 + confinement |x|^2
            terms = _quartic_velocity_terms(0.25, 0.5, 0.25, d)
            if p['confinement']:
                terms.extend(_squared_norm_terms(p['confinement'], d, 0))
            return terms
        return [_parse_custom_term(entry, d) for entry in p['terms']]

    # -- evaluation on stacked phase points z = (x, v), shape (n, 2d) ---------

    def value_z(self, z: np.ndarray) -> np.ndarray:
        d = z.shape[1] // 2
        if self.kind == 'sum':
            return sum((part.value_z(z) for part in self.params['parts']), np.zeros(z.shape[0]))
        if self.kind in WELL_KINDS:
            return self._well_scale() * self._well_distance(z)[0]
        out = np.zeros(z.shape[0])
        for term in self.terms(d):
            m, _, _ = _monomial(term, z, order=0)
            out += m * _gaussian(term, z)[0]
        return out

    def grad_z(self, z: np.ndarray) -> np.ndarray:
        d = z.shape[1] // 2
        if self.kind == 'sum':
            return sum((part.grad_z(z) for part in self.params['parts']), np.zeros(z.shape))
        if self.kind in WELL_KINDS:
            out = np.zeros(z.shape)
            out[:, 1] = self._well_scale() * self._well_distance(z)[1]
            return out
        out = np.zeros(z.shape)
        for term in self.terms(d):
            m, dm, _ = _monomial(term, z, order=1)
            e, qz = _gaussian(term, z)
            out += (dm - 2.0 * m[:, None] * qz) * e[:, None]
        return out

    def hess_z(self, z: np.ndarray) -> np.ndarray:
        n, D = z.shape
        d = D // 2
        if self.kind == 'sum':
            return sum((part.hess_z(z) for part in self.params['parts']), np.zeros((n, D, D)))
        if self.kind in WELL_KINDS:
            return np.zeros((n, D, D))
        out = np.zeros((n, D, D))
        for term in self.terms(d):
            m, dm, d2m = _monomial(term, z, order=2)
            e, qz = _gaussian(term, z)
            h = d2m - 2.0 * (dm[:, :, None] * qz[:, None, :] + qz[:, :, None] * dm[:, None, :])
            if term.quad is not None:
                h += m[:, None, None] * (4.0 * qz[:, :, None] * qz[:, None, :] - 2.0 * term.quad)
            out += h * e[:, None, None]
        return out

    def _well_scale(self) -> float:
        return self.params['scale'] if self.kind == 'two_well' else self.params['alpha']

    def _well_distance(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if z.shape[1] != 2:
            raise ValidationError(f"kind '{self.kind}' is one-dimensional")
        wells = np.asarray(self.params['wells'])
        offsets = z[:, 1:2] - wells[None, :]
        dist = np.abs(offsets)
        # ties go to the larger well, which gives the right-limit slope
        nearest = wells.size - 1 - np.argmin(dist[:, ::-1], axis=1)
        signed = offsets[np.arange(z.shape[0]), nearest]
        return dist.min(axis=1), np.where(signed >= 0, 1.0, -1.0)

    # -- public (x, v) interface ---------------------------------------------

    def value(self, x: Any, v: Any) -> Union[float, np.ndarray]:
        z, single = phase_stack(x, v)
        out = self.value_z(z)
        return float(out[0]) if single else out

    def grad(self, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray]:
        """(grad_x, grad_v), each shaped like x."""
        z, single = phase_stack(x, v)
        g = self.grad_z(z)
        d = z.shape[1] // 2
        gx, gv = g[:, :d], g[:, d:]
        return (gx[0], gv[0]) if single else (gx, gv)

    def hess(self, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(H_xx, H_xv, H_vv) with H_xv[a, b] = d^2 / dx_a dv_b."""
        z, single = phase_stack(x, v)
        h = self.hess_z(z)
        d = z.shape[1] // 2
        blocks = (h[:, :d, :d], h[:, :d, d:], h[:, d:, d:])
        return tuple(b[0] for b in blocks) if single else blocks


def phase_stack(x: Any, v: Any) -> Tuple[np.ndarray, bool]:
    """Stack positions and velocities into z = (x, v) rows."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    single = x.ndim <= 1
    x = np.atleast_2d(x) if x.ndim else x.reshape(1, 1)
    v = np.atleast_2d(v) if v.ndim else v.reshape(1, 1)
    if x.shape != v.shape:
        raise ValidationError(f"x {x.shape} and v {v.shape} must have the same shape")
    return np.hstack([x, v]), single


def _monomial(term: PolyGaussTerm, z: np.ndarray, order: int):
    powers = np.asarray(term.powers)
    if powers.size != z.shape[1]:
        raise ValidationError(f"term of phase dimension {powers.size} used with {z.shape[1]}")
    n, D = z.shape
    pw = z ** powers
    m = term.coef * np.prod(pw, axis=1)
    dm = d2m = None
    if order >= 1:
        dm = np.zeros((n, D))
        for i in np.flatnonzero(powers):
            rest = np.prod(np.delete(pw, i, axis=1), axis=1)
            dm[:, i] = term.coef * powers[i] * z[:, i] ** (powers[i] - 1) * rest
    if order >= 2:
        d2m = np.zeros((n, D, D))
        active = np.flatnonzero(powers)
        for i in active:
            if powers[i] >= 2:
                rest = np.prod(np.delete(pw, i, axis=1), axis=1)
                d2m[:, i, i] = (term.coef * powers[i] * (powers[i] - 1)
                                * z[:, i] ** (powers[i] - 2) * rest)
            for j in active:
                if j <= i:
                    continue
                rest = np.prod(np.delete(pw, [i, j], axis=1), axis=1)
                mixed = (term.coef * powers[i] * powers[j] * z[:, i] ** (powers[i] - 1)
                         * z[:, j] ** (powers[j] - 1) * rest)
                d2m[:, i, j] = d2m[:, j, i] = mixed
    return m, dm, d2m


def _gaussian(term: PolyGaussTerm, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    if term.quad is None:
        return np.ones(z.shape[0]), np.zeros(z.shape)
    qz = z @ term.quad
    return np.exp(-np.einsum('ni,ni->n', z, qz)), qz


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------

def evaluate(spec: PotentialSpec, x: Any, v: Any) -> Union[float, np.ndarray]:
    return spec.value(x, v)


def grad(spec: PotentialSpec, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray]:
    return spec.grad(x, v)


def hess(spec: PotentialSpec, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    return spec.hess(x, v)


def combine(*specs: PotentialSpec) -> PotentialSpec:
    parts = tuple(s for s in specs if not s.is_zero())
    if not parts:
        return PotentialSpec('zero')
    if len(parts) == 1:
        return parts[0]
    return PotentialSpec('sum', {'parts': parts})


def pair_form(spec_psi: PotentialSpec,
              spec_U: Optional[PotentialSpec]) -> Tuple[PotentialSpec, PotentialSpec]:
    """
    Rewrite (psi, U) so that Phi(f) = <f, psi> + 1/2 <f, U * f> literally.

    variance_penalty becomes psi = 1/4 (|v|^2 - 1)^2 with U = |v|^2 added to the
    interaction, since the variance equals 1/2 <f, |v - v'|^2 * f>.
    """
    spec_U = spec_U if spec_U is not None else PotentialSpec('zero')
    if spec_U.kind == 'variance_penalty':
        raise ValidationError("variance_penalty is a kinetic-slot kind")
    if spec_psi.kind == 'variance_penalty':
        kinetic = PotentialSpec('quartic_well')
        if spec_psi.params['confinement']:
            kinetic = combine(kinetic, PotentialSpec('quadratic_position',
                                                     {'kappa': spec_psi.params['confinement']}))
        return kinetic, combine(PotentialSpec('velocity_quadratic'), spec_U)
    return spec_psi, spec_U


class MeanFieldLagrangian:
    """
    L[f](x, v) = psi(x, v) + sum_k w_k U(x - x_k, v - v_k).

    All methods take (x, v) of shape (d,) or (n, d) and mirror PotentialSpec.
    """

    def __init__(self, spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                 f: DiscreteStatistic):
        self.psi, self.U = pair_form(spec_psi, spec_U)
        self.psi.check_dim(f.dim)
        self.U.check_dim(f.dim)
        self.f = f
        self._atoms = np.hstack([f.positions, f.velocities])

    @property
    def dim(self) -> int:
        return self.f.dim

    def _offsets(self, z: np.ndarray) -> np.ndarray:
        n, D = z.shape
        return (z[:, None, :] - self._atoms[None, :, :]).reshape(-1, D)

    def value_z(self, z: np.ndarray) -> np.ndarray:
        out = self.psi.value_z(z)
        if not self.U.is_zero():
            u = self.U.value_z(self._offsets(z)).reshape(z.shape[0], -1)
            out = out + u @ self.f.weights
        return out

    def grad_z(self, z: np.ndarray) -> np.ndarray:
        out = self.psi.grad_z(z)
        if not self.U.is_zero():
            g = self.U.grad_z(self._offsets(z)).reshape(z.shape[0], -1, z.shape[1])
            out = out + np.einsum('nkd,k->nd', g, self.f.weights)
        return out

    def hess_z(self, z: np.ndarray) -> np.ndarray:
        out = self.psi.hess_z(z)
        if not self.U.is_zero():
            D = z.shape[1]
            h = self.U.hess_z(self._offsets(z)).reshape(z.shape[0], -1, D, D)
            out = out + np.einsum('nkab,k->nab', h, self.f.weights)
        return out

    def value(self, x: Any, v: Any) -> Union[float, np.ndarray]:
        z, single = phase_stack(x, v)
        out = self.value_z(z)
        return float(out[0]) if single else out

    def grad(self, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray]:
        z, single = phase_stack(x, v)
        g = self.grad_z(z)
        d = self.dim
        return (g[0, :d], g[0, d:]) if single else (g[:, :d], g[:, d:])

    def hess(self, x: Any, v: Any) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        z, single = phase_stack(x, v)
        h = self.hess_z(z)
        d = self.dim
        blocks = (h[:, :d, :d], h[:, :d, d:], h[:, d:, d:])
        return tuple(b[0] for b in blocks) if single else blocks


def mean_field_lagrangian(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                          f: DiscreteStatistic) -> MeanFieldLagrangian:
    return MeanFieldLagrangian(spec_psi, spec_U, f)


def pairwise_psi2(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                  x: Any, v: Any, xp: Any, vp: Any) -> Union[float, np.ndarray]:
    """psi_2 = 1/2 psi(x, v) + 1/2 psi(x', v') + 1/2 U(x - x', v - v')."""
    psi, U = pair_form(spec_psi, spec_U)
    z, single = phase_stack(x, v)
    zp, _ = phase_stack(xp, vp)
    out = 0.5 * psi.value_z(z) + 0.5 * psi.value_z(zp) + 0.5 * U.value_z(z - zp)
    return float(out[0]) if single else out


def check_symmetry(spec: PotentialSpec, d: int, samples: int = 1000, seed: int = 0,
                   radius: float = 3.0) -> float:
    """Largest |U(x, v) - U(-x, -v)| over uniformly sampled points."""
    spec.check_dim(d)
    rng = make_rng(seed, f"symmetry:{spec.kind}")
    z = rng.uniform(-radius, radius, size=(samples, 2 * d))
    return float(np.max(np.abs(spec.value_z(z) - spec.value_z(-z))))


# ---------------------------------------------------------------------------
# Growth and continuity audit
# ---------------------------------------------------------------------------

@dataclass
class GrowthAudit:
    """Sampled constants for the growth, continuity and convexity assumptions."""
    samples: int
    c: float
    C: float
    passed: bool
    scales: Tuple[float, ...]
    a2_constant: float
    psi2_convex: bool
    c1_constant: Optional[float] = None
    c2_bound: Optional[float] = None
    witness: Optional[Dict[str, Any]] = None
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'samples': self.samples,
            'c': self.c,
            'C': self.C,
            'passed': self.passed,
            'scales': list(self.scales),
            'a2_constant': self.a2_constant,
            'psi2_convex': self.psi2_convex,
            'c1_constant': self.c1_constant,
            'c2_bound': self.c2_bound,
            'witness': self.witness,
            'notes': list(self.notes),
        }


def _audit_statistics(d: int, box: Tuple[float, float], samples: int,
                      rng: np.random.Generator) -> List[DiscreteStatistic]:
    x_radius, v_radius = box
    stats = []
    unit = np.zeros(d)
    unit[0] = 1.0
    for r in np.linspace(0.0, v_radius, 9)[1:]:
        stats.append(DiscreteStatistic(np.zeros((1, d)), (r * unit)[None, :], [1.0]))
        stats.append(DiscreteStatistic(np.zeros((2, d)), np.stack([r * unit, -r * unit]), [0.5, 0.5]))
    for s in range(samples):
        if s % 3 == 0:
            v = rng.uniform(-v_radius, v_radius, size=d)
            x = rng.uniform(-x_radius, x_radius, size=(2, d))
            stats.append(DiscreteStatistic(x, np.stack([v, -v]), [0.5, 0.5]))
            continue
        k = int(rng.integers(1, 5))
        stats.append(DiscreteStatistic(
            rng.uniform(-x_radius, x_radius, size=(k, d)),
            rng.uniform(-v_radius, v_radius, size=(k, d)),
            rng.dirichlet(np.ones(k)),
        ))
    return stats


def _scaled(f: DiscreteStatistic, scale: float) -> DiscreteStatistic:
    return DiscreteStatistic(f.positions, scale * f.velocities, f.weights)


def audit_growth(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec],
                 box: Tuple[float, float] = (2.0, 2.0), samples: int = 256,
                 d: int = 1, seed: int = 0,
                 scales: Sequence[float] = (1.0, 2.0, 4.0, 8.0)) -> GrowthAudit:
    """
    Sample the growth bound <f, -C + c|v|^2> <= Phi(f) on random statistics.

    Statistics are drawn in `box = (x_radius, v_radius)`, always including
    antipodal velocity pairs, and their velocities are stretched by `scales`.
    c is half the smallest ratio Phi/<f,|v|^2> at the largest scale; a ratio
    that collapses between the two largest scales means sub-quadratic growth
    and fails the audit. C is the largest sampled violation of c<f,|v|^2>.
    """
    from .action import phi
    from .wasserstein import wp

    spec_U = spec_U if spec_U is not None else PotentialSpec('zero')
    spec_psi.check_dim(d)
    spec_U.check_dim(d)
    if samples < 1 or min(box) <= 0:
        raise ValidationError("audit needs a nonempty box and at least one sample")
    rng = make_rng(seed, 'audit_growth')
    stats = _audit_statistics(d, box, samples, rng)
    scales = tuple(sorted(float(s) for s in scales))

    values = np.array([[phi(spec_psi, spec_U, _scaled(f, s)) for s in scales] for f in stats])
    m2 = np.array([[float(f.weights @ np.sum((s * f.velocities) ** 2, axis=1)) for s in scales]
                   for f in stats])
    moving = m2[:, -1] > 0
    ratios = values[moving] / m2[moving]
    worst = int(np.argmin(ratios[:, -1]))
    top = float(ratios[worst, -1])
    previous = float(ratios[:, -2].min()) if len(scales) > 1 else top
    notes = []
    passed = top > 1e-8 and (len(scales) == 1 or top >= 0.75 * previous)
    witness = None
    if passed:
        c = 0.5 * top
        C = float(max(0.0, np.max(c * m2 - values)))
    else:
        c, C = 0.0, float('inf')
        f = stats[int(np.flatnonzero(moving)[worst])]
        witness = {
            'positions': f.positions.tolist(),
            'velocities': (scales[-1] * f.velocities).tolist(),
            'weights': f.weights.tolist(),
            'phi': float(values[moving][worst, -1]),
            'second_moment': float(m2[moving][worst, -1]),
        }
        if top <= 1e-8:
            notes.append("Phi vanishes on a statistic with nonzero velocity moment")
        else:
            notes.append("Phi / <f,|v|^2> decays under velocity scaling")
        logger.warning("growth_audit_failed", psi=spec_psi.kind, U=spec_U.kind,
                       ratio=top, previous_ratio=previous)

    # continuity: |Phi(f) - Phi(f')| <= <f + f', C(1 + |v|^2)>^(1/2) W_2(f, f')
    a2 = 0.0
    for f in stats[: min(len(stats), 64)]:
        jitter = 1e-3 * rng.standard_normal(size=(2,) + f.positions.shape)
        g = DiscreteStatistic(f.positions + jitter[0], f.velocities + jitter[1], f.weights)
        distance, _ = wp(f, g, p=2)
        if distance <= 0:
            continue
        mass = (float(f.weights @ (1 + np.sum(f.velocities ** 2, axis=1)))
                + float(g.weights @ (1 + np.sum(g.velocities ** 2, axis=1))))
        gap = abs(phi(spec_psi, spec_U, f) - phi(spec_psi, spec_U, g))
        a2 = max(a2, (gap / (np.sqrt(mass) * distance)) ** 2)

    convex, c1, c2 = _audit_pair_potential(spec_psi, spec_U, d, box, samples, rng)
    audit = GrowthAudit(samples=len(stats), c=c, C=C, passed=passed, scales=scales,
                        a2_constant=float(a2), psi2_convex=convex, c1_constant=c1,
                        c2_bound=c2, witness=witness, notes=notes)
    logger.info("growth_audit", psi=spec_psi.kind, U=spec_U.kind, passed=passed, c=c, C=C,
                psi2_convex=convex, c1=c1)
    return audit


def _audit_pair_potential(spec_psi: PotentialSpec, spec_U: PotentialSpec, d: int,
                          box: Tuple[float, float], samples: int,
                          rng: np.random.Generator) -> Tuple[bool, Optional[float], Optional[float]]:
    """
    (v, v')-convexity of psi_2, the smallest eigenvalue of grad_v grad_v psi_2
    and a bound on |grad^2 psi_2| + |grad psi_2(x,0,x',0)| + |psi_2(x,0,x',0)|.
    Third derivatives are not sampled.
    """
    psi, U = pair_form(spec_psi, spec_U)
    x_radius, v_radius = box
    x = rng.uniform(-x_radius, x_radius, size=(samples, d))
    xp = rng.uniform(-x_radius, x_radius, size=(samples, d))
    v = rng.uniform(-v_radius, v_radius, size=(samples, d))
    vp = rng.uniform(-v_radius, v_radius, size=(samples, d))
    z, zp = np.hstack([x, v]), np.hstack([xp, vp])

    if not (psi.is_smooth() and U.is_smooth()):
        t = rng.uniform(size=(samples, 1))
        w, wp_ = rng.uniform(-v_radius, v_radius, size=(2, samples, d))
        za, zpa = np.hstack([x, w]), np.hstack([xp, wp_])
        zm = np.hstack([x, t * v + (1 - t) * w])
        zpm = np.hstack([xp, t * vp + (1 - t) * wp_])

        def psi2(a, b):
            return 0.5 * psi.value_z(a) + 0.5 * psi.value_z(b) + 0.5 * U.value_z(a - b)

        lhs = psi2(zm, zpm)
        rhs = t[:, 0] * psi2(z, zp) + (1 - t[:, 0]) * psi2(za, zpa)
        return bool(np.all(lhs <= rhs + 1e-10)), None, None

    D = 2 * d
    h_psi, h_psi_p, h_u = psi.hess_z(z), psi.hess_z(zp), U.hess_z(z - zp)
    w_vv = h_u[:, d:, d:]
    block = np.zeros((samples, 2 * d, 2 * d))
    block[:, :d, :d] = 0.5 * (h_psi[:, d:, d:] + w_vv)
    block[:, d:, d:] = 0.5 * (h_psi_p[:, d:, d:] + w_vv)
    block[:, :d, d:] = block[:, d:, :d] = -0.5 * w_vv
    convex = bool(np.linalg.eigvalsh(block).min() >= -1e-9)
    c1 = float(np.linalg.eigvalsh(block[:, :d, :d]).min())

    full = np.zeros((samples, 2 * D, 2 * D))
    full[:, :D, :D] = 0.5 * (h_psi + h_u)
    full[:, D:, D:] = 0.5 * (h_psi_p + h_u)
    full[:, :D, D:] = full[:, D:, :D] = -0.5 * h_u
    second = np.linalg.norm(full, ord=2, axis=(1, 2))
    z0, zp0 = z.copy(), zp.copy()
    z0[:, d:] = 0.0
    zp0[:, d:] = 0.0
    g_u = U.grad_z(z0 - zp0)
    gradient = np.hstack([0.5 * psi.grad_z(z0) + 0.5 * g_u, 0.5 * psi.grad_z(zp0) - 0.5 * g_u])
    value = 0.5 * psi.value_z(z0) + 0.5 * psi.value_z(zp0) + 0.5 * U.value_z(z0 - zp0)
    c2 = float(np.max(second + np.linalg.norm(gradient, axis=1) + np.abs(value)))
    return convex, c1, c2


def is_pair_convex(spec_psi: PotentialSpec, spec_U: Optional[PotentialSpec], d: int = 1,
                   box: Tuple[float, float] = (2.0, 2.0), samples: int = 256, seed: int = 0) -> bool:
    """Sampled (v, v')-convexity of psi_2, the sufficient condition for Phi = Phi^rel."""
    spec_U = spec_U if spec_U is not None else PotentialSpec('zero')
    spec_psi.check_dim(d)
    spec_U.check_dim(d)
    rng = make_rng(seed, 'pair_convexity')
    return _audit_pair_potential(spec_psi, spec_U, d, box, samples, rng)[0]
