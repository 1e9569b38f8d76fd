"""
Problem instances for N agents interacting pairwise through their controls.

An instance bundles the aggregate control cost ``f0`` on R^d, the table of
radial pairwise costs ``h_ij(a) = hhat_ij(|a|)``, the terminal cost ``g`` on
(R^d)^N and a product initial law.  The interaction cost is

    f(a) = f0(mean_i a_i) + (1/N^2) sum_{i,j} hhat_ij(|a_i - a_j|).

Arrays holding one value per agent use the trailing shape ``(N, d)``; any
leading axes are batch axes.

The catalog names accepted by :func:`build_instance` are

* ``quadratic_pairwise(kappa)`` and ``pseudo_huber_pairwise(kappa, delta)``
* ``huber_terminal(c, delta)`` and ``quadratic_terminal(c[, b])``
* ``zero_f0`` and ``lipschitz_f0(L, delta)``
* ``gaussian_init(mean, cov_scale)`` and ``dirac_init(point)``
"""

from __future__ import annotations

import ast
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Raised for malformed instances or handles that cannot be evaluated."""


def fd_step(x):
    return 1e-5 * (1.0 + np.abs(x))


def central_gradient(fn, x):
    """Central-difference gradient of ``fn`` over the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.shape[-1]):
        h = fd_step(x[..., k])
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        g[..., k] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def central_hessian(grad, x):
    """Central-difference Jacobian of a gradient handle (last axis)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    H = np.empty(x.shape + (n,))
    for k in range(n):
        h = fd_step(x[..., k])
        xp = x.copy()
        xm = x.copy()
        xp[..., k] += h
        xm[..., k] -= h
        H[..., :, k] = (grad(xp) - grad(xm)) / (2 * h)[..., None]
    return 0.5 * (H + np.swapaxes(H, -1, -2))


# ---------------------------------------------------------------------------
# cost specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalarCost:
    """A convex aggregate cost ``f0`` on R^d.

    ``lipschitz`` and ``hess_bound`` are the declared sup-norms of ``Df0``
    (Euclidean) and ``D2f0`` (operator norm).
    """

    fn: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None
    lipschitz: float = 0.0
    hess_bound: float = 0.0
    name: str = "custom"
    is_zero: bool = False

    def value(self, v):
        if self.is_zero:
            return np.zeros(np.shape(v)[:-1])
        return np.asarray(self.fn(np.asarray(v, dtype=float)), dtype=float)

    def gradient(self, v):
        v = np.asarray(v, dtype=float)
        if self.is_zero:
            return np.zeros_like(v)
        if self.grad is not None:
            return np.asarray(self.grad(v), dtype=float)
        return central_gradient(self.fn, v)

    def hessian(self, v):
        v = np.asarray(v, dtype=float)
        if self.is_zero:
            return np.zeros(v.shape + (v.shape[-1],))
        if self.hess is not None:
            return np.asarray(self.hess(v), dtype=float)
        return central_hessian(self.gradient, v)


@dataclass(frozen=True)
class RadialCost:
    """Pairwise cost ``h(a) = profile(|a|)`` with profile on R_+.

    ``d2_sup`` is the declared bound on ``profile''``; for a convex profile
    with zero slope at the origin it bounds the operator norm of ``D2h``
    (the tangential curvature ``profile'(r)/r`` is at most ``sup profile''``).
    ``kappa`` is set for the quadratic profile ``kappa r^2 / 2``, whose
    gradient ``kappa a`` is linear; solvers use it for closed-form averages.
    """

    profile: Callable
    d1: Optional[Callable] = None
    d2: Optional[Callable] = None
    d2_sup: float = 0.0
    kappa: Optional[float] = None
    name: str = "custom"

    @property
    def is_zero(self):
        return self.kappa == 0.0

    def slope(self, r):
        r = np.asarray(r, dtype=float)
        if self.d1 is not None:
            return np.asarray(self.d1(r), dtype=float)
        h = fd_step(r)
        lo = np.maximum(r - h, 0.0)
        return (self.profile(r + h) - self.profile(lo)) / (r + h - lo)

    def curvature(self, r):
        r = np.asarray(r, dtype=float)
        if self.d2 is not None:
            return np.asarray(self.d2(r), dtype=float)
        h = fd_step(r)
        lo = np.maximum(r - h, 0.0)
        return (self.slope(r + h) - self.slope(lo)) / (r + h - lo)

    def value(self, a):
        a = np.asarray(a, dtype=float)
        if self.kappa is not None:
            return 0.5 * self.kappa * np.sum(a * a, axis=-1)
        return np.asarray(self.profile(np.linalg.norm(a, axis=-1)), dtype=float)

    def gradient(self, a):
        a = np.asarray(a, dtype=float)
        if self.kappa is not None:
            return self.kappa * a
        r = np.linalg.norm(a, axis=-1, keepdims=True)
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > 0, self.slope(r) * a / safe, 0.0)

    def hessian(self, a):
        a = np.asarray(a, dtype=float)
        d = a.shape[-1]
        eye = np.eye(d)
        if self.kappa is not None:
            return np.broadcast_to(self.kappa * eye, a.shape + (d,)).copy()
        r = np.linalg.norm(a, axis=-1)[..., None, None]
        safe = np.where(r > 0, r, 1.0)
        u = a[..., :, None] / safe[..., 0]
        uu = u * np.swapaxes(u, -1, -2)
        radial = self.curvature(r)
        tangential = np.where(r > 0, self.slope(r) / safe, self.curvature(np.zeros_like(r)))
        return radial * uu + tangential * (eye - uu)

    def hess_norm(self, dim=None):
        """Declared bound on ``sup |D2h|`` (operator norm)."""
        return float(self.d2_sup)

    def grad_sup_on_ball(self, radius, n_grid=10_000):
        """``sup_{|a| <= radius} |Dh(a)|``."""
        if self.kappa is not None:
            return float(self.kappa * radius)
        r = np.linspace(0.0, radius, n_grid)
        return float(np.max(np.abs(self.slope(r))))

    def same_as(self, other, r_max=10.0):
        if other is self:
            return True
        if self.kappa is not None and other.kappa is not None:
            return self.kappa == other.kappa
        r = np.linspace(0.0, r_max, 257)
        return bool(np.allclose(self.profile(r), other.profile(r), rtol=1e-12, atol=1e-14))


ZERO_PAIRWISE = RadialCost(profile=lambda r: np.zeros_like(r), d1=lambda r: np.zeros_like(r),
                           d2=lambda r: np.zeros_like(r), d2_sup=0.0, kappa=0.0, name="zero")


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost ``g`` on (R^d)^N.

    Parameters
    ----------
    fn, grad : callables
        ``fn(x)`` maps ``(..., N, d)`` to ``(...)``; ``grad(x)`` returns the
        per-agent blocks ``D_{x_i} g`` with shape ``(..., N, d)``.
    C_G : float
        Scale with ``0 <= D2g <= (C_G/N) I`` and ``|D_{x_i} g| <= C_G/N``.
    K_G : float, optional
        Cross-derivative scale, ``|D_ij g| <= K_G / N^2``.
    cross_norms : (N, N) array, optional
        Table of ``sup |D_ij g|`` (operator norm).
    matrix : (Nd, Nd) array, optional
        Hessian ``G`` when ``g(x) = x^T G x / 2``.
    bounded_gradient : bool
        False for quadratic costs, whose gradient is unbounded.
    """

    fn: Callable
    grad: Optional[Callable] = None
    C_G: float = 0.0
    K_G: Optional[float] = None
    cross_norms: Optional[np.ndarray] = None
    matrix: Optional[np.ndarray] = None
    bounded_gradient: bool = True
    name: str = "custom"

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if self.matrix is not None:
            flat = x.reshape(x.shape[:-2] + (-1,))
            return 0.5 * np.einsum("...a,ab,...b->...", flat, self.matrix, flat)
        return np.asarray(self.fn(x), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if self.matrix is not None:
            flat = x.reshape(x.shape[:-2] + (-1,))
            return (flat @ self.matrix).reshape(x.shape)
        if self.grad is not None:
            return np.asarray(self.grad(x), dtype=float)
        shape = x.shape
        flat = x.reshape(shape[:-2] + (-1,))
        g = central_gradient(lambda y: self.fn(y.reshape(y.shape[:-1] + shape[-2:])), flat)
        return g.reshape(shape)


# ---------------------------------------------------------------------------
# initial laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AgentLaw:
    """Law of one agent's initial state: Dirac, Gaussian or custom sampler."""

    kind: str
    mean: np.ndarray
    cov: Optional[np.ndarray] = None
    poincare: Optional[float] = None
    sampler: Optional[Callable] = None

    def sample(self, n, rng):
        d = self.mean.shape[0]
        if self.kind == "dirac":
            return np.broadcast_to(self.mean, (n, d)).copy()
        if self.kind == "gaussian":
            L = np.linalg.cholesky(self.cov)
            return self.mean + rng.standard_normal((n, d)) @ L.T
        if self.sampler is None:
            raise ConfigurationError("custom agent law has no sampler")
        return np.asarray(self.sampler(n, rng), dtype=float).reshape(n, d)

    @property
    def covariance(self):
        d = self.mean.shape[0]
        if self.kind == "dirac":
            return np.zeros((d, d))
        if self.cov is None:
            raise ConfigurationError(f"covariance of a {self.kind} law is unknown")
        return self.cov


def dirac_law(point):
    return AgentLaw("dirac", np.atleast_1d(np.asarray(point, dtype=float)))


def gaussian_law(mean, cov):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.asarray(cov, dtype=float)
    if cov.ndim == 0:
        cov = cov * np.eye(mean.shape[0])
    if not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
        raise ConfigurationError("Gaussian covariance must be symmetric positive definite")
    return AgentLaw("gaussian", mean, cov)


@dataclass(frozen=True)
class InitialLaw:
    """Product of per-agent laws."""

    blocks: tuple

    @property
    def n_agents(self):
        return len(self.blocks)

    @property
    def dim(self):
        return self.blocks[0].mean.shape[0]

    def sample(self, n_paths, rng):
        return np.stack([b.sample(n_paths, rng) for b in self.blocks], axis=1)

    def means(self):
        return np.stack([b.mean for b in self.blocks])

    def covariances(self):
        return np.stack([b.covariance for b in self.blocks])

    @property
    def is_dirac(self):
        return all(b.kind == "dirac" for b in self.blocks)


def poincare_constant(initial_law):
    """Poincaré constant of a product law.

    A Gaussian block with density proportional to ``exp(-U)`` has
    ``D2U = cov^{-1} >= lambda I`` with ``lambda = 1/lambda_max(cov)``, so its
    constant is ``1/lambda = lambda_max(cov)``.  Dirac blocks contribute 0
    (their variance vanishes), custom blocks their declared constant.  The
    product constant is the maximum over blocks.
    """
    consts = []
    for b in initial_law.blocks:
        if b.poincare is not None:
            consts.append(float(b.poincare))
        elif b.kind == "gaussian":
            consts.append(float(np.linalg.eigvalsh(b.cov).max()))
        elif b.kind == "dirac":
            consts.append(0.0)
        else:
            raise ConfigurationError("custom agent law without a declared Poincaré constant")
    return max(consts)


# ---------------------------------------------------------------------------
# problem spec
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    n_agents: int
    dim: int
    horizon: float
    f0: ScalarCost
    h_table: tuple
    terminal: TerminalCost
    initial_law: InitialLaw
    start_time: float = 0.0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        N = self.n_agents
        if N < 1 or self.dim < 1:
            raise ConfigurationError("n_agents and dim must be positive")
        if self.horizon <= 0 or not (0.0 <= self.start_time <= self.horizon):
            raise ConfigurationError("need horizon > 0 and start_time in [0, horizon]")
        table = [list(row) for row in self.h_table]
        if len(table) != N or any(len(row) != N for row in table):
            raise ConfigurationError(f"h_table must be {N}x{N}")
        for i in range(N):
            table[i][i] = ZERO_PAIRWISE
        for i in range(N):
            for j in range(i + 1, N):
                if not table[i][j].same_as(table[j][i]):
                    raise ConfigurationError(f"h_table is not symmetric at ({i}, {j})")
        object.__setattr__(self, "h_table", tuple(tuple(row) for row in table))
        if self.initial_law.n_agents != N or self.initial_law.dim != self.dim:
            raise ConfigurationError("initial law does not match (n_agents, dim)")

    @property
    def remaining(self):
        return self.horizon - self.start_time

    @property
    def kappa(self):
        """``(N, N)`` table of quadratic coefficients, or None if any profile is not quadratic."""
        N = self.n_agents
        K = np.zeros((N, N))
        for i in range(N):
            for j in range(N):
                k = self.h_table[i][j].kappa
                if k is None:
                    return None
                K[i, j] = k
        return K

    @property
    def quadratic_pairwise(self):
        return self.kappa is not None

    @property
    def is_lq(self):
        return self.quadratic_pairwise and self.f0.is_zero and self.terminal.matrix is not None

    @property
    def interaction_free(self):
        """True when ``f`` vanishes identically."""
        K = self.kappa
        return self.f0.is_zero and K is not None and not K.any()

    def pairwise_groups(self):
        """Distinct off-diagonal profiles with their ``(N, N)`` masks."""
        groups = []
        N = self.n_agents
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                c = self.h_table[i][j]
                if c.is_zero:
                    continue
                for g in groups:
                    if g[0] is c:
                        g[1][i, j] = True
                        break
                else:
                    mask = np.zeros((N, N), dtype=bool)
                    mask[i, j] = True
                    groups.append((c, mask))
        return groups

    def hess_norm_table(self):
        """``(N, N)`` table of ``sup |D2 h_ij|`` (operator norm)."""
        N = self.n_agents
        return np.array([[self.h_table[i][j].hess_norm(self.dim) if i != j else 0.0
                          for j in range(N)] for i in range(N)])

    def sample_initial(self, n_paths, rng):
        return self.initial_law.sample(n_paths, rng)

    def with_n_agents(self, n):
        """Not available for custom specs; rebuild through :func:`build_instance`."""
        raise ConfigurationError("use build_instance(...) to resize a catalog instance")


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

def quadratic_pairwise(kappa):
    kappa = float(kappa)
    if kappa < 0:
        raise ConfigurationError("kappa must be nonnegative")
    return RadialCost(profile=lambda r: 0.5 * kappa * r * r, d1=lambda r: kappa * r,
                      d2=lambda r: kappa * np.ones_like(r), d2_sup=kappa, kappa=kappa,
                      name=f"quadratic_pairwise({kappa!r})")


def pseudo_huber_pairwise(kappa, delta=1.0):
    """``kappa delta^2 (sqrt(1 + r^2/delta^2) - 1)``: convex, slope at most ``kappa delta``."""
    kappa, delta = float(kappa), float(delta)

    def profile(r):
        return kappa * delta**2 * (np.sqrt(1.0 + (r / delta) ** 2) - 1.0)

    def d1(r):
        return kappa * r / np.sqrt(1.0 + (r / delta) ** 2)

    def d2(r):
        return kappa * (1.0 + (r / delta) ** 2) ** -1.5

    return RadialCost(profile=profile, d1=d1, d2=d2, d2_sup=kappa,
                      name=f"pseudo_huber_pairwise({kappa!r}, {delta!r})")


def zero_f0(dim=1):
    return ScalarCost(fn=lambda v: np.zeros(np.shape(v)[:-1]), lipschitz=0.0, hess_bound=0.0,
                      name="zero_f0", is_zero=True)


def lipschitz_f0(L, delta=1.0, dim=1):
    """Smooth ``L``-Lipschitz convex cost ``L (sqrt(|v|^2 + delta^2) - delta)``."""
    L, delta = float(L), float(delta)

    def fn(v):
        return L * (np.sqrt(np.sum(v * v, axis=-1) + delta**2) - delta)

    def grad(v):
        rho = np.sqrt(np.sum(v * v, axis=-1, keepdims=True) + delta**2)
        return L * v / rho

    def hess(v):
        d = v.shape[-1]
        rho = np.sqrt(np.sum(v * v, axis=-1) + delta**2)[..., None, None]
        vv = v[..., :, None] * v[..., None, :]
        return L * (np.eye(d) / rho - vv / rho**3)

    return ScalarCost(fn=fn, grad=grad, hess=hess, lipschitz=L, hess_bound=L / delta,
                      name=f"lipschitz_f0({L!r}, {delta!r})")


def _pseudo_norm(x, delta):
    return np.sqrt(np.sum(x * x, axis=-1) + delta**2) - delta


def huber_terminal(c, delta, n_agents, dim=1):
    """``g(x) = (c/N) sum_i psi(x_i)`` with the smoothed norm ``psi``.

    ``|D psi| <= 1`` and ``D2 psi <= I/delta``, so the declared scale is
    ``C_G = c max(1, 1/delta)``.
    """
    c, delta, N = float(c), float(delta), int(n_agents)

    def fn(x):
        return (c / N) * np.sum(_pseudo_norm(x, delta), axis=-1)

    def grad(x):
        rho = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + delta**2)
        return (c / N) * x / rho

    cross = np.diag(np.full(N, (c / N) / delta))
    return TerminalCost(fn=fn, grad=grad, C_G=c * max(1.0, 1.0 / delta), cross_norms=cross,
                        name=f"huber_terminal({c!r}, {delta!r})")


def quadratic_terminal(c, b=0.0, n_agents=1, dim=1):
    """``g(x) = (c/2N) |x|^2 + (b/2) |mean x|^2`` (LQ regime: unbounded gradient)."""
    c, b, N = float(c), float(b), int(n_agents)
    G_agents = (c / N) * np.eye(N) + (b / N**2) * np.ones((N, N))
    G = np.kron(G_agents, np.eye(dim))
    cross = np.abs(G_agents)
    K_G = b if b > 0 else None
    return TerminalCost(fn=None, C_G=c + b, K_G=K_G, cross_norms=cross, matrix=G,
                        bounded_gradient=False, name=f"quadratic_terminal({c!r}, {b!r})")


def gaussian_init(mean, cov_scale, n_agents, dim=1):
    return InitialLaw(tuple(gaussian_law(np.full(dim, float(mean)), float(cov_scale))
                            for _ in range(n_agents)))


def dirac_init(point, n_agents, dim=1):
    return InitialLaw(tuple(dirac_law(np.full(dim, float(point))) for _ in range(n_agents)))


_PAIRWISE = {"quadratic_pairwise": quadratic_pairwise, "pseudo_huber_pairwise": pseudo_huber_pairwise}
_F0 = {"zero_f0": zero_f0, "lipschitz_f0": lipschitz_f0}
_TERMINAL = {"huber_terminal": huber_terminal, "quadratic_terminal": quadratic_terminal}
_INIT = {"gaussian_init": gaussian_init, "dirac_init": dirac_init}

_CALL = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def parse_catalog(text):
    """Split ``"name(a, b)"`` into ``("name", (a, b))``."""
    m = _CALL.match(text)
    if m is None:
        raise ConfigurationError(f"cannot parse catalog entry {text!r}")
    name, args = m.group(1), m.group(2)
    if args is None or not args.strip():
        return name, ()
    try:
        parsed = ast.literal_eval(f"({args},)")
    except (ValueError, SyntaxError) as exc:
        raise ConfigurationError(f"bad arguments in {text!r}") from exc
    return name, tuple(parsed)


def _lookup(table, text, kind):
    name, args = parse_catalog(text)
    if name not in table:
        raise ConfigurationError(f"unknown {kind} {name!r}; choose from {sorted(table)}")
    return table[name], args


def build_instance(n_agents, dim=1, pairwise="quadratic_pairwise(0.5)",
                   terminal="huber_terminal(1.0, 1.0)", f0="zero_f0",
                   init="gaussian_init(0.0, 1.0)", horizon=1.0, start_time=0.0):
    """Assemble a :class:`ProblemSpec` from catalog strings or ready objects.

    ``pairwise`` may also be a full ``N x N`` nested sequence of
    :class:`RadialCost`.
    """
    N, d = int(n_agents), int(dim)
    if isinstance(pairwise, str):
        maker, args = _lookup(_PAIRWISE, pairwise, "pairwise cost")
        h = maker(*args)
        table = tuple(tuple(h for _ in range(N)) for _ in range(N))
    elif isinstance(pairwise, RadialCost):
        table = tuple(tuple(pairwise for _ in range(N)) for _ in range(N))
    else:
        table = tuple(tuple(row) for row in pairwise)
    if isinstance(f0, str):
        maker, args = _lookup(_F0, f0, "f0")
        f0 = maker(*args, dim=d)
    if isinstance(terminal, str):
        maker, args = _lookup(_TERMINAL, terminal, "terminal cost")
        terminal = maker(*args, n_agents=N, dim=d)
    if isinstance(init, str):
        maker, args = _lookup(_INIT, init, "initial law")
        init = maker(*args, n_agents=N, dim=d)
    names = [p if isinstance(p, str) else getattr(p, "name", "custom")
             for p in (pairwise, terminal, f0, init)]
    return ProblemSpec(n_agents=N, dim=d, horizon=float(horizon), f0=f0, h_table=table,
                       terminal=terminal, initial_law=init, start_time=float(start_time),
                       name=" / ".join(names))


# ---------------------------------------------------------------------------
# assumption audit
# ---------------------------------------------------------------------------

@dataclass
class AuditItem:
    name: str
    passed: bool
    worst: float
    declared: float
    note: str = ""


@dataclass
class AuditReport:
    items: list
    n_probes: int
    box: float
    seed: int

    @property
    def passed(self):
        return all(it.passed for it in self.items)

    def failures(self):
        return [it for it in self.items if not it.passed]

    def to_dict(self):
        return {"passed": self.passed, "n_probes": self.n_probes, "box": self.box,
                "seed": self.seed,
                "items": [dict(name=it.name, passed=bool(it.passed), worst=float(it.worst),
                               declared=float(it.declared), note=it.note) for it in self.items]}


def _evaluate(handle_name, fn, *args):
    try:
        out = np.asarray(fn(*args), dtype=float)
    except Exception as exc:  # noqa: BLE001 - surface any failure as configuration error
        raise ConfigurationError(f"handle {handle_name!r} cannot be evaluated: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise ConfigurationError(f"handle {handle_name!r} returned non-finite values")
    return out


def _exceeds(measured, declared, rel=1e-6, atol=1e-12):
    return measured > declared * (1 + rel) + atol


def audit_assumptions(spec, n_probes=200, seed=0, box=5.0, lq_exempt=None):
    """Sample-based audit of the standing convexity and regularity assumptions.

    Sup-norms over (R^d)^N are not computable, so every item is checked on
    uniform probes in ``[-box, box]``.  Each item reports its worst observed
    value next to the declared constant and fails once the former exceeds
    the latter by relative 1e-6.

    In the LQ regime the bounded-gradient requirement on ``g`` cannot hold;
    with ``lq_exempt`` (default: on for quadratic terminal costs) the item is
    reported as exempt rather than failed.
    """
    if n_probes < 1:
        raise ConfigurationError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    N, d = spec.n_agents, spec.dim
    items = []
    if lq_exempt is None:
        lq_exempt = spec.terminal.matrix is not None

    # pairwise profiles
    r = np.linspace(0.0, box * 2.0, max(n_probes, 64))
    seen = []
    for i in range(N):
        for j in range(N):
            c = spec.h_table[i][j]
            if i == j or any(c is s for s in seen):
                continue
            seen.append(c)
            h0 = float(_evaluate(f"h[{i}][{j}].profile", c.profile, np.zeros(1))[0])
            s0 = float(_evaluate(f"h[{i}][{j}].d1", c.slope, np.zeros(1))[0])
            slope = _evaluate(f"h[{i}][{j}].d1", c.slope, r)
            curv = _evaluate(f"h[{i}][{j}].d2", c.curvature, r)
            tag = f"h[{i}][{j}]={c.name}"
            items.append(AuditItem(f"pairwise {tag}: hhat(0)=0", abs(h0) <= 1e-12, abs(h0), 0.0))
            items.append(AuditItem(f"pairwise {tag}: hhat'(0)=0", abs(s0) <= 1e-6, abs(s0), 0.0))
            items.append(AuditItem(f"pairwise {tag}: nondecreasing", slope.min() >= -1e-9,
                                   float(max(-slope.min(), 0.0)), 0.0))
            items.append(AuditItem(f"pairwise {tag}: convex", curv.min() >= -1e-6,
                                   float(max(-curv.min(), 0.0)), 0.0))
            items.append(AuditItem(f"pairwise {tag}: sup hhat'' <= declared",
                                   not _exceeds(curv.max(), c.d2_sup), float(curv.max()), c.d2_sup))
            if c.d1 is not None:
                mid = r[1:-1]
                fd = (c.profile(mid + 1e-5 * (1 + mid)) - c.profile(mid - 1e-5 * (1 + mid))) / (2e-5 * (1 + mid))
                rel = np.max(np.abs(fd - slope[1:-1]) / (1e-8 + np.abs(slope[1:-1])))
                items.append(AuditItem(f"pairwise {tag}: slope handle matches differences",
                                       rel <= 1e-5 or np.max(np.abs(fd - slope[1:-1])) <= 1e-8,
                                       float(rel), 1e-5))
            a = rng.uniform(-box, box, (n_probes, d))
            even = np.max(np.abs(c.value(a) - c.value(-a)))
            items.append(AuditItem(f"pairwise {tag}: even", even <= 1e-12, float(even), 0.0))

    # aggregate cost
    f0 = spec.f0
    v = rng.uniform(-box, box, (n_probes, d))
    g = _evaluate("f0.grad", f0.gradient, v)
    H = _evaluate("f0.hess", f0.hessian, v)
    items.append(AuditItem("f0: |Df0| <= declared", not _exceeds(np.linalg.norm(g, axis=-1).max(), f0.lipschitz),
                           float(np.linalg.norm(g, axis=-1).max()), f0.lipschitz))
    hn = float(np.abs(np.linalg.eigvalsh(H)).max())
    items.append(AuditItem("f0: |D2f0| <= declared", not _exceeds(hn, f0.hess_bound), hn, f0.hess_bound))
    lam = float(np.linalg.eigvalsh(H).min())
    items.append(AuditItem("f0: convex", lam >= -1e-7, max(-lam, 0.0), 0.0))
    if not f0.is_zero and f0.grad is not None:
        fd = central_gradient(f0.fn, v)
        rel = float(np.max(np.linalg.norm(fd - g, axis=-1) / (1e-8 + np.linalg.norm(g, axis=-1))))
        items.append(AuditItem("f0: gradient handle matches differences", rel <= 1e-5, rel, 1e-5))

    # terminal cost
    term = spec.terminal
    C_G = term.C_G
    x = rng.uniform(-box, box, (n_probes, N, d))
    _evaluate("terminal.fn", term.value, x)
    gx = _evaluate("terminal.grad", term.gradient, x)
    sup_block = float(np.linalg.norm(gx, axis=-1).max())
    grad_ok = not _exceeds(sup_block, C_G / N)
    if lq_exempt and not term.bounded_gradient:
        items.append(AuditItem("terminal: sup_i |D_i g| <= C_G/N", True, sup_block, C_G / N,
                               note="exempt (LQ regime, unbounded gradient)"))
    else:
        items.append(AuditItem("terminal: sup_i |D_i g| <= C_G/N", grad_ok, sup_block, C_G / N))
    if term.grad is not None and term.fn is not None:
        fd = central_gradient(lambda y: term.value(y.reshape(y.shape[:-1] + (N, d))),
                              x.reshape(n_probes, N * d)).reshape(x.shape)
        rel = float(np.max(np.abs(fd - gx)) / (1e-12 + np.max(np.abs(gx))))
        items.append(AuditItem("terminal: gradient handle matches differences", rel <= 1e-5, rel, 1e-5))
    # Rayleigh quotients of D2g along random directions
    y = rng.standard_normal((n_probes, N, d))
    y /= np.linalg.norm(y.reshape(n_probes, -1), axis=1)[:, None, None]
    eps = 1e-4 * (1 + box)
    quot = np.sum((term.gradient(x + eps * y) - term.gradient(x - eps * y)) * y, axis=(-1, -2)) / (2 * eps)
    items.append(AuditItem("terminal: D2g >= 0", quot.min() >= -1e-6, float(max(-quot.min(), 0.0)), 0.0))
    items.append(AuditItem("terminal: D2g <= (C_G/N) I", not _exceeds(quot.max(), C_G / N, rel=1e-4),
                           float(quot.max()), C_G / N))
    if term.K_G is not None:
        sup_cross = _cross_norm_sup(term, x[: min(n_probes, 32)], offdiag=True)
        items.append(AuditItem("terminal: |D_ij g| <= K_G/N^2 (i != j)",
                               not _exceeds(sup_cross, term.K_G / N**2, rel=1e-4), sup_cross, term.K_G / N**2))

    # initial law
    try:
        cp = poincare_constant(spec.initial_law)
        items.append(AuditItem("initial law: Poincaré constant", np.isfinite(cp), cp, cp))
    except ConfigurationError as exc:
        items.append(AuditItem("initial law: Poincaré constant", False, np.inf, 0.0, note=str(exc)))

    report = AuditReport(items=items, n_probes=n_probes, box=box, seed=seed)
    for it in report.failures():
        logger.info("audit failure: %s (worst %.3g vs %.3g)", it.name, it.worst, it.declared)
    return report


def _cross_norm_sup(term, x, offdiag=True):
    """Largest operator norm of the blocks ``D_ij g`` on probes ``x``."""
    n, N, d = x.shape
    best = 0.0
    for j in range(N):
        for k in range(d):
            e = np.zeros((N, d))
            e[j, k] = 1.0
            h = 1e-4
            col = (term.gradient(x + h * e) - term.gradient(x - h * e)) / (2 * h)  # (n, N, d) = d/dx_jk D_i g
            if offdiag:
                col[:, j, :] = 0.0
            if k == 0:
                blocks = np.zeros((n, N, d, d))
            blocks[..., k] = col
        best = max(best, float(np.linalg.norm(blocks, ord=2, axis=(-2, -1)).max()))
    return best
