"""
Interaction cost, pointwise and distributed optimizers, and the two Hamiltonians.

With ``F_p(a) = sum_i (p_i . a_i + |a_i|^2 / 2N) + f(a)`` the full-information
Hamiltonian is ``H(p) = -min_a F_p(a)`` and its maximizer ``a_hat`` solves

    a_i = -N p_i - N d_i f(a).

The distributed optimizer ``a_check`` replaces ``d_i f`` by its average over
the other agents' laws and is tabulated at the particle sites of each agent.
Both are computed by damped Picard iteration, which is a gradient step of size
``theta`` on the 1-strongly convex objective ``N F_p``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

_CHUNK = 2048


class NonConvergenceError(RuntimeError):
    """Fixed-point iteration stopped at ``max_iters`` with ``residual`` left."""

    def __init__(self, message, residual, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class FixedPointConfig:
    damping: Optional[float] = None
    tol: float = 1e-10
    max_iters: int = 10_000

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.damping is not None and not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class FixedPointReport:
    iterations: int
    residual: float
    damping: float
    monotone: bool = True


@dataclass
class ControlResult:
    values: np.ndarray
    report: FixedPointReport


# ---------------------------------------------------------------------------
# f^N and its gradient
# ---------------------------------------------------------------------------

def hessian_bound(spec):
    """Operator-norm bound on ``D2 f`` used for the default damping."""
    N = spec.n_agents
    K = spec.kappa
    if K is not None:
        rows = K.sum(axis=1)
    else:
        rows = np.array([sum(spec.h_table[i][j].d2_sup for j in range(N) if j != i) for i in range(N)])
    return 4.0 / N**2 * float(rows.max(initial=0.0)) + spec.f0.hess_bound / N


def default_damping(spec):
    return 1.0 / (1.0 + spec.n_agents * hessian_bound(spec))


def eval_fN(spec, a):
    """``f0(mean a) + (1/N^2) sum_ij hhat_ij(|a_i - a_j|)`` for ``a`` of shape ``(..., N, d)``."""
    a = np.asarray(a, dtype=float)
    N = spec.n_agents
    out = spec.f0.value(a.mean(axis=-2))
    K = spec.kappa
    if K is not None:
        if K.any():
            sq = np.sum((a[..., :, None, :] - a[..., None, :, :]) ** 2, axis=-1)
            out = out + np.einsum("...ij,ij->...", sq, K) / (2 * N**2)
        return out
    diff = a[..., :, None, :] - a[..., None, :, :]
    for cost, mask in spec.pairwise_groups():
        out = out + np.sum(np.where(mask, cost.value(diff), 0.0), axis=(-1, -2)) / N**2
    return out


def grad_fN(spec, a):
    """Blocks ``d_i f = (2/N^2) sum_j Dh_ij(a_i - a_j) + (1/N) Df0(mean a)``."""
    a = np.asarray(a, dtype=float)
    N = spec.n_agents
    K = spec.kappa
    out = np.zeros_like(a)
    if not spec.f0.is_zero:
        out = out + spec.f0.gradient(a.mean(axis=-2))[..., None, :] / N
    if K is not None:
        if K.any():
            out = out + (2.0 / N**2) * (K.sum(axis=1)[:, None] * a - np.einsum("ij,...jd->...id", K, a))
        return out
    diff = a[..., :, None, :] - a[..., None, :, :]
    for cost, mask in spec.pairwise_groups():
        out = out + (2.0 / N**2) * np.sum(np.where(mask[..., None], cost.gradient(diff), 0.0), axis=-2)
    return out


# ---------------------------------------------------------------------------
# full-information optimizer
# ---------------------------------------------------------------------------

def _picard(step_map, a0, N, cfg, theta, what):
    """Iterate ``a <- (1-theta) a + theta T(a)`` until ``|T(a) - a|_inf <= N tol``."""
    a = a0
    residuals = []
    for it in range(1, cfg.max_iters + 1):
        target = step_map(a)
        res = float(np.max(np.abs(target - a), initial=0.0))
        residuals.append(res)
        if res <= N * cfg.tol:
            monotone = all(r1 <= r0 * (1 + 1e-12) + 1e-300 for r0, r1 in zip(residuals[1:], residuals[2:]))
            if not monotone:
                logger.debug("%s: residual not monotone after the first sweep", what)
            return a, FixedPointReport(iterations=it - 1, residual=res, damping=theta, monotone=monotone)
        a = a + theta * (target - a)
    raise NonConvergenceError(f"{what}: no convergence after {cfg.max_iters} iterations "
                              f"(residual {residuals[-1]:.3e})", residuals[-1], cfg.max_iters)


def solve_hat_a(spec, p, cfg=FixedPointConfig(), a0=None):
    """Full-information optimizer ``a_hat(p)`` for ``p`` of shape ``(..., N, d)``.

    The iteration starts at ``-N p`` unless a warm start ``a0`` is given.  On
    return ``|a + N p + N grad_fN(a)|_inf <= N * cfg.tol`` holds.
    """
    p = np.asarray(p, dtype=float)
    N = spec.n_agents
    theta = cfg.damping if cfg.damping is not None else default_damping(spec)
    base = -N * p
    if spec.interaction_free:
        return ControlResult(base.copy(), FixedPointReport(0, 0.0, theta))
    start = base.copy() if a0 is None else np.array(a0, dtype=float)
    a, report = _picard(lambda a: base - N * grad_fN(spec, a), start, N, cfg, theta, "solve_hat_a")
    return ControlResult(a, report)


def full_objective(spec, p, a):
    """``-sum_i (p_i . a_i + |a_i|^2 / 2N) - f(a)``."""
    N = spec.n_agents
    return -np.sum(p * a + a * a / (2 * N), axis=(-1, -2)) - eval_fN(spec, a)


def hamiltonian_full(spec, p, cfg=FixedPointConfig(), a0=None):
    p = np.asarray(p, dtype=float)
    a = solve_hat_a(spec, p, cfg, a0).values
    return full_objective(spec, p, a)


def envelope_grad_H(spec, p, cfg=FixedPointConfig(), a0=None):
    """``DH(p) = -a_hat(p)``."""
    return -solve_hat_a(spec, p, cfg, a0).values


def project_to_ball(a, radius):
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    a = np.asarray(a, dtype=float)
    r = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(r > radius, radius / np.where(r > 0, r, 1.0), 1.0)
    return a * scale


# ---------------------------------------------------------------------------
# distributed optimizer on particle ensembles
# ---------------------------------------------------------------------------

def _as_sites(ensemble):
    vals = getattr(ensemble, "values", ensemble)
    return np.asarray(vals, dtype=float)


def _conditional_partial(spec, a_query, ref):
    """Average of ``d_i f`` with agent ``i`` at ``a_query[:, i]`` and the others drawn from ``ref``.

    ``a_query`` has shape ``(Q, N, d)`` and ``ref`` shape ``(M, N, d)``; the
    columns of ``ref`` are the empirical laws of the other agents.  The
    pairwise part is averaged under the product of these empirical laws,
    which only needs one column at a time.  The ``f0`` part is averaged over
    the rows of ``ref`` taken as joint samples of the other agents.
    """
    N = spec.n_agents
    Q = a_query.shape[0]
    out = np.zeros_like(a_query)
    K = spec.kappa
    if K is not None:
        if K.any():
            col_mean = ref.mean(axis=0)  # (N, d)
            out += (2.0 / N**2) * (K.sum(axis=1)[:, None] * a_query - (K @ col_mean)[None])
    else:
        for cost, mask in spec.pairwise_groups():
            for i in range(N):
                for j in np.flatnonzero(mask[i]):
                    acc = np.zeros((Q, spec.dim))
                    for s in range(0, ref.shape[0], _CHUNK):
                        diff = a_query[:, i, None, :] - ref[None, s:s + _CHUNK, j, :]
                        acc += cost.gradient(diff).sum(axis=1)
                    out[:, i] += (2.0 / N**2) * acc / ref.shape[0]
    if not spec.f0.is_zero:
        row_sum = ref.sum(axis=1)  # (M, d)
        for i in range(N):
            others = row_sum - ref[:, i, :]
            acc = np.zeros((Q, spec.dim))
            for s in range(0, ref.shape[0], _CHUNK):
                v = (a_query[:, i, None, :] + others[None, s:s + _CHUNK]) / N
                acc += spec.f0.gradient(v).sum(axis=1)
            out[:, i] += acc / (N * ref.shape[0])
    return out


def solve_check_a(spec, q, ensemble=None, cfg=FixedPointConfig(), a0=None):
    """Distributed optimizer tabulated at the particle sites.

    Parameters
    ----------
    q : (M, N, d) array
        ``q[k, i]`` is agent ``i``'s covector at its ``k``-th site.
    ensemble : ParticleEnsemble or array, optional
        Only used to check that the sites align with ``q``.

    Returns
    -------
    ControlResult
        ``values[k, i]`` is ``a_check^i`` at site ``k`` of agent ``i``.
    """
    q = np.asarray(q, dtype=float)
    if q.ndim != 3 or q.shape[1:] != (spec.n_agents, spec.dim):
        raise ValueError(f"q must have shape (M, {spec.n_agents}, {spec.dim})")
    if ensemble is not None and _as_sites(ensemble).shape != q.shape:
        raise ValueError("covector sites do not align with the ensemble")
    N = spec.n_agents
    theta = cfg.damping if cfg.damping is not None else default_damping(spec)
    base = -N * q
    if spec.interaction_free:
        return ControlResult(base.copy(), FixedPointReport(0, 0.0, theta))
    start = base.copy() if a0 is None else np.array(a0, dtype=float)
    a, report = _picard(lambda a: base - N * _conditional_partial(spec, a, a), start, N, cfg, theta,
                        "solve_check_a")
    return ControlResult(a, report)


def extend_check_a(spec, q_query, ref_controls, cfg=FixedPointConfig()):
    """Evaluate ``a_check`` off the particle support.

    ``q_query`` has shape ``(Q, N, d)``; the other agents' controls are frozen
    at ``ref_controls`` (the tabulated fixed point).
    """
    q_query = np.asarray(q_query, dtype=float)
    ref = np.asarray(ref_controls, dtype=float)
    N = spec.n_agents
    base = -N * q_query
    if spec.interaction_free:
        return base
    theta = cfg.damping if cfg.damping is not None else default_damping(spec)
    K = spec.kappa
    if K is not None and spec.f0.is_zero:
        # the map is affine in the query value: solve it directly
        c = (2.0 / N) * K.sum(axis=1)[:, None]
        return (base + (2.0 / N) * (K @ ref.mean(axis=0))[None]) / (1.0 + c)
    a, _ = _picard(lambda a: base - N * _conditional_partial(spec, a, ref), base.copy(), N, cfg, theta,
                   "extend_check_a")
    return a


def product_expected_fN(spec, a):
    """``f`` averaged under the product of the column laws of ``a`` (shape ``(M, N, d)``).

    Exact for the pairwise part; the ``f0`` part is averaged over rows.
    """
    N, M = spec.n_agents, a.shape[0]
    out = float(np.mean(spec.f0.value(a.mean(axis=1)))) if not spec.f0.is_zero else 0.0
    K = spec.kappa
    if K is not None:
        if K.any():
            m = a.mean(axis=0)
            second = np.mean(np.sum(a * a, axis=-1), axis=0)
            pair = second[:, None] + second[None, :] - 2.0 * m @ m.T
            np.fill_diagonal(pair, 0.0)
            out += float(np.sum(K * pair)) / (2 * N**2)
        return out
    for cost, mask in spec.pairwise_groups():
        for i, j in zip(*np.nonzero(mask)):
            acc = 0.0
            for s in range(0, M, _CHUNK):
                diff = a[:, i, None, :] - a[None, s:s + _CHUNK, j, :]
                acc += float(cost.value(diff).sum())
            out += acc / (M * M * N**2)
    return out


def dist_objective(spec, q, a):
    N = spec.n_agents
    lin = np.sum(np.mean(np.sum(q * a + a * a / (2 * N), axis=-1), axis=0))
    return -float(lin) - product_expected_fN(spec, a)


def hamiltonian_dist(spec, q, ensemble=None, cfg=FixedPointConfig(), a0=None):
    """Distributed Hamiltonian on the empirical product law."""
    q = np.asarray(q, dtype=float)
    a = solve_check_a(spec, q, ensemble, cfg, a0).values
    return dist_objective(spec, q, a)
