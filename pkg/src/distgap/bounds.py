"""
Constants of the gap estimate and Monte Carlo estimators of the error terms.

Notation: ``C+ = C_G + |Df0|_inf`` bounds every optimal control, and

    S_h = (4/N^2) sum_ij |D2h_ij|^2 + |D2f0|^2

is the curvature budget that appears in most bounds.  Matrix sup-norms are
operator norms.

The error terms are evaluated on particle ensembles ``(M, N, d)``.  The
decomposition used here is ``E = E1' + E2`` with

    E1' = int H(q) dm - HH(q, m)    (>= 0),
    E2  = int H(DV) dm - int H(q) dm,

where ``q_i = D_{m^i} V(t, m^{-i}, x_i)``.  :func:`estimate_E1` reports
``E1 = -E1'`` (the distributed Hamiltonian minus the averaged one).
Conditional averages use product-column empirical means, and standard
errors come from 20 batch means over rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .hamiltonian import (FixedPointConfig, _conditional_partial, dist_objective, full_objective, grad_fN,
                          solve_check_a, solve_hat_a)
from .model import ConfigurationError, poincare_constant

N_BATCHES = 20


class HypothesisViolation(ConfigurationError):
    """An estimator was called outside the hypotheses of its bound."""


# ---------------------------------------------------------------------------
# closed-form constants
# ---------------------------------------------------------------------------

def compute_Cp(c_p, C_G, T):
    """``(e^{2 C_G T} - 1) / (2 C_G) + c_p e^{2 C_G T}`` (``T + c_p`` at ``C_G = 0``)."""
    if c_p < 0 or C_G < 0 or T < 0:
        raise ValueError("compute_Cp needs nonnegative inputs")
    x = 2.0 * C_G * T
    if x == 0:
        return T + c_p
    return T * (math.expm1(x) / x) + c_p * math.exp(x)


def propagated_poincare(c_p, C_G, elapsed):
    """Poincaré constant of the flow after ``elapsed`` time units."""
    return compute_Cp(c_p, C_G, elapsed)


@dataclass
class BoundInputs:
    n_agents: int
    horizon: float
    C_G: float
    c_p: float
    Df0: float
    D2f0: float
    D2h: np.ndarray
    Dh_ball: float
    Dg_cross: np.ndarray
    K_G: Optional[float] = None
    K1_prime: float = 1.0
    Kf_prime: float = 1.0

    @property
    def C_plus(self):
        return self.C_G + self.Df0

    @property
    def S_h(self):
        N = self.n_agents
        return 4.0 / N**2 * float(np.sum(self.D2h**2)) + self.D2f0**2

    @property
    def C_p(self):
        return compute_Cp(self.c_p, self.C_G, self.horizon)


def bound_inputs(spec, K1_prime=1.0, Kf_prime=1.0, n_grid=10_000):
    """Collect the norms the constants depend on.

    ``max |Dh_ij|`` over the ball of radius ``C+`` is exact for quadratic
    profiles and a 1-D grid search otherwise.
    """
    N = spec.n_agents
    term = spec.terminal
    if term.cross_norms is None:
        raise ConfigurationError("terminal cost must declare its cross-derivative table")
    C_G = float(term.C_G)
    Df0 = float(spec.f0.lipschitz)
    radius = C_G + Df0
    D2h = spec.hess_norm_table()
    Dh_ball = 0.0
    for cost, _ in spec.pairwise_groups():
        Dh_ball = max(Dh_ball, cost.grad_sup_on_ball(radius, n_grid))
    return BoundInputs(n_agents=N, horizon=spec.horizon, C_G=C_G, c_p=poincare_constant(spec.initial_law),
                       Df0=Df0, D2f0=float(spec.f0.hess_bound), D2h=D2h, Dh_ball=Dh_ball,
                       Dg_cross=np.asarray(term.cross_norms, dtype=float), K_G=term.K_G,
                       K1_prime=float(K1_prime), Kf_prime=float(Kf_prime))


def compute_K1(inp):
    N = inp.n_agents
    curv = math.sqrt(4.0 / N**2 * float(np.sum(inp.D2h**2))) + inp.D2f0
    return inp.K1_prime / math.sqrt(N) * (2 * inp.Dh_ball + inp.Df0) * inp.C_plus * curv**2


def _Kg(C_G, N, C_p, sum_sq, tau):
    e = math.exp(1.5 * C_G * tau / N)
    root = math.sqrt(N * C_p * sum_sq)
    return e * root * (2 * C_G + e * root)


def compute_Kf_Kg(inp, t):
    """``(K_f(t), K_g(t), (T - t)(K_f + K_g))``."""
    N, T = inp.n_agents, inp.horizon
    tau = T - t
    if tau < 0:
        raise ValueError("t exceeds the horizon")
    K1 = compute_K1(inp)
    Kf = K1 + inp.Kf_prime * inp.C_plus**2 / math.sqrt(N) * math.sqrt(inp.S_h * math.expm1(3 * inp.C_G * tau / N))
    Kg = _Kg(inp.C_G, N, inp.C_p, float(np.sum(inp.Dg_cross**2)), tau)
    return Kf, Kg, tau * (Kf + Kg)


def gronwall_rhs(inp, EQ_T, s):
    """Right-hand side of the backward Gronwall bound on ``E_Q(s)``."""
    N = inp.n_agents
    growth = 3 * inp.C_G * (inp.horizon - s) / N
    return math.exp(growth) * EQ_T + inp.C_plus**2 / N * inp.S_h * math.expm1(growth)


def an_bound(inp):
    return 8 * inp.C_plus**2 * inp.S_h


def diff_f_bound(inp, i):
    """Bound on the conditional variance of ``d_i f`` along bounded distributed controls."""
    N = inp.n_agents
    return 8 * inp.C_plus**2 / N**3 * (4.0 / N * float(np.sum(inp.D2h[i] ** 2)) + inp.D2f0**2)


@dataclass
class BoundReport:
    n_agents: int
    t: float
    C_G: float
    K_G: Optional[float]
    c_p: float
    C_p: float
    Df0: float
    D2f0: float
    D2h_max: float
    Dh_ball: float
    K1_prime: float
    Kf_prime: float
    K1: float
    Kf: float
    Kg: float
    rhs_theorem: float
    Kg_KG: Optional[float] = None
    M: Optional[float] = None
    M_over_sqrtN: Optional[float] = None

    def to_dict(self):
        out = asdict(self)
        return {k: (None if v is None else float(v) if k != "n_agents" else int(v)) for k, v in out.items()}


def bound_report(spec, t=None, K1_prime=1.0, Kf_prime=1.0):
    """Every constant of the gap estimate at time ``t`` (default: start time).

    When ``K_G`` is declared, ``Kg_KG`` is ``K_g`` with every cross norm
    replaced by ``K_G / N^2`` and ``M = sqrt(N) (T - t)(K_f + Kg_KG)``.
    """
    t = spec.start_time if t is None else float(t)
    inp = bound_inputs(spec, K1_prime, Kf_prime)
    Kf, Kg, rhs = compute_Kf_Kg(inp, t)
    N = inp.n_agents
    Kg_KG = M = M_sqrt = None
    if inp.K_G is not None:
        Kg_KG = _Kg(inp.C_G, N, inp.C_p, N * N * (inp.K_G / N**2) ** 2, inp.horizon - t)
        M_sqrt = (inp.horizon - t) * (Kf + Kg_KG)
        M = math.sqrt(N) * M_sqrt
    return BoundReport(n_agents=N, t=t, C_G=inp.C_G, K_G=inp.K_G, c_p=inp.c_p, C_p=inp.C_p, Df0=inp.Df0,
                       D2f0=inp.D2f0, D2h_max=float(inp.D2h.max(initial=0.0)), Dh_ball=inp.Dh_ball,
                       K1_prime=inp.K1_prime, Kf_prime=inp.Kf_prime, K1=compute_K1(inp), Kf=Kf, Kg=Kg,
                       rhs_theorem=rhs, Kg_KG=Kg_KG, M=M, M_over_sqrtN=M_sqrt)


# ---------------------------------------------------------------------------
# Monte Carlo error estimators
# ---------------------------------------------------------------------------

@dataclass
class ErrorEstimate:
    value: float
    stderr: float
    n_samples: int
    time: Optional[float] = None

    def to_dict(self):
        return {"value": float(self.value), "stderr": float(self.stderr), "n_samples": int(self.n_samples),
                "time": None if self.time is None else float(self.time)}


def batch_stderr(samples, n_batches=N_BATCHES):
    """Standard error of the mean from contiguous batch means."""
    x = np.asarray(samples, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        return 0.0
    b = min(n_batches, n)
    means = np.array([chunk.mean() for chunk in np.array_split(x, b)])
    return float(means.std(ddof=1) / np.sqrt(b))


def _sites(ensemble):
    return np.asarray(getattr(ensemble, "values", ensemble), dtype=float)


def estimate_E1(spec, q, ensemble=None, fp_cfg=FixedPointConfig(), t=None):
    """Distributed Hamiltonian minus the row average of ``H(q(x))``.

    Nonpositive up to Monte Carlo error, since the distributed supremum runs
    over a smaller class.
    """
    q = np.asarray(q, dtype=float)
    a_check = solve_check_a(spec, q, ensemble, fp_cfg).values
    a_hat = solve_hat_a(spec, q, fp_cfg).values
    H_rows = full_objective(spec, q, a_hat)
    HH = dist_objective(spec, q, a_check)
    rowwise = full_objective(spec, q, a_check) - H_rows
    return ErrorEstimate(float(HH - H_rows.mean()), batch_stderr(rowwise), q.shape[0], t)


def estimate_AN(spec, q, ensemble=None, fp_cfg=FixedPointConfig(), t=None, check=True):
    """Mean over rows of ``sum_i |a_hat(q(x))_i - a_check^i(x_i)|^2``.

    Raises
    ------
    HypothesisViolation
        If some sampled ``|q^i|`` exceeds ``C_G / N`` (checked on the
        ensemble, the only place the field is known).
    """
    q = np.asarray(q, dtype=float)
    N = spec.n_agents
    if check:
        worst = float(np.linalg.norm(q, axis=-1).max())
        if worst > spec.terminal.C_G / N * (1 + 1e-9):
            raise HypothesisViolation(f"max |q^i| = {worst:.4g} exceeds C_G/N = {spec.terminal.C_G / N:.4g}")
    a_check = solve_check_a(spec, q, ensemble, fp_cfg).values
    a_hat = solve_hat_a(spec, q, fp_cfg).values
    rows = np.sum((a_hat - a_check) ** 2, axis=(-1, -2))
    return ErrorEstimate(float(rows.mean()), batch_stderr(rows), q.shape[0], t)


def conditional_mean_field(spec, p_field, ensemble, t=None, n_ref=None):
    """Values of ``p`` at the rows and their product-column conditional means.

    ``p_field`` is either a ``RiccatiSolution`` (with ``t``), whose gradient
    is affine so the conditional mean only needs column means, or a callable
    ``x -> (M, N, d)`` evaluated on all ``(row, reference row)`` pairs.
    """
    x = _sites(ensemble)
    M, N, d = x.shape
    if hasattr(p_field, "blocks"):
        B = p_field.blocks(t)
        p = np.einsum("ijab,mjb->mia", B, x)
        off = B.copy()
        off[np.arange(N), np.arange(N)] = 0.0
        diag = B[np.arange(N), np.arange(N)]
        cond = np.einsum("iab,mib->mia", diag, x) + np.einsum("ijab,jb->ia", off, x.mean(axis=0))[None]
        return p, cond
    p = np.asarray(p_field(x), dtype=float)
    ref = x if n_ref is None else x[:n_ref]
    cond = np.zeros_like(p)
    for i in range(N):
        for k in range(M):
            y = ref.copy()
            y[:, i, :] = x[k, i]
            cond[k, i] = np.asarray(p_field(y), dtype=float)[:, i, :].mean(axis=0)
    return p, cond


def estimate_EQ(spec, p_field, ensemble, t=None, n_ref=None):
    """``N sum_i (E|p_i|^2 - E|E[p_i | X_i]|^2)`` on the ensemble."""
    p, cond = conditional_mean_field(spec, p_field, ensemble, t, n_ref)
    N = spec.n_agents
    rows = N * np.sum(p * p - cond * cond, axis=(-1, -2))
    return ErrorEstimate(float(rows.mean()), batch_stderr(rows), rows.size, t)


def estimate_E2(spec, p_field, ensemble, t=None, fp_cfg=FixedPointConfig(), n_ref=None):
    """``int H(DV) dm - int H(q) dm`` with ``q`` the conditional mean of ``DV``."""
    p, cond = conditional_mean_field(spec, p_field, ensemble, t, n_ref)
    H_full = full_objective(spec, p, solve_hat_a(spec, p, fp_cfg).values)
    H_cond = full_objective(spec, cond, solve_hat_a(spec, cond, fp_cfg).values)
    rows = H_full - H_cond
    return ErrorEstimate(float(rows.mean()), batch_stderr(rows), rows.size, t)


def conditional_variance_partial(spec, a, fp_cfg=None):
    """Per agent, mean over rows of ``|d_i f(a(row)) - E_{-i} d_i f|^2`` for fields ``a`` of shape ``(M, N, d)``.

    Returns two ``(N,)`` arrays: estimates and batch standard errors.
    """
    a = np.asarray(a, dtype=float)
    full = grad_fN(spec, a)
    cond = _conditional_partial(spec, a, a)
    sq = np.sum((full - cond) ** 2, axis=-1)  # (M, N)
    return sq.mean(axis=0), np.array([batch_stderr(sq[:, i]) for i in range(a.shape[1])])


@dataclass
class GronwallRow:
    time: float
    EQ: float
    EQ_err: float
    rhs: float
    rhs_err: float
    passed: bool


def check_gronwall_EQ(spec, riccati, flow, inp=None, n_sigma=3.0):
    """Compare ``E_Q(s, m_s)`` along a recorded flow with its Gronwall envelope.

    ``riccati`` supplies ``DV(s, x) = P(s) x``; the flow's recorded ensembles
    stand in for the laws ``m_s``.
    """
    if flow.states is None:
        raise ValueError("flow was not recorded")
    inp = bound_inputs(spec) if inp is None else inp
    T = spec.horizon
    final = estimate_EQ(spec, riccati, flow.states[-1], T)
    rows = []
    for k, s in enumerate(flow.times):
        est = final if k == len(flow.times) - 1 else estimate_EQ(spec, riccati, flow.states[k], s)
        growth = math.exp(3 * inp.C_G * (T - s) / inp.n_agents)
        rhs = gronwall_rhs(inp, final.value, s)
        rhs_err = growth * final.stderr
        sigma = est.stderr if k == len(flow.times) - 1 else math.hypot(est.stderr, rhs_err)
        rows.append(GronwallRow(float(s), est.value, est.stderr, rhs, rhs_err,
                                bool(est.value <= rhs + n_sigma * sigma)))
    return rows
