"""
Value functions: Monte Carlo costs, the LQ Riccati solution, a small-grid
HJB solver, the lifted value, and two upper bounds for the distributed value.

Throughout, the generator of the state process is ``(1/2) sum_i Laplacian_i``,
as dictated by unit Brownian motion in ``dX^i = alpha^i dt + dW^i``.

LQ regime
---------
With ``f0 = 0``, ``hhat_ij(r) = kappa_ij r^2 / 2`` and ``g(x) = x^T G x / 2``,

    f(a) = a^T Q a / 2,   Q = (2/N^2) (diag(kappa 1) - kappa) (x) I_d,
    H(p) = p^T R^{-1} p / 2,   R = I/N + Q,

and ``V(t, x) = x^T P(t) x / 2 + s(t)`` with

    dP/dt = P R^{-1} P,   P(T) = G,
    ds/dt = -tr(P) / 2,   s(T) = 0.

For a product Gaussian (or Dirac) initial law, the distributed optimum splits
into a deterministic problem for the means, solved by the same ``P``, plus one
scalar-gain problem per agent for the fluctuations around the mean:

    dPi_i/dt = Pi_i Pi_i / R_ii,   Pi_i(T) = G_ii.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline, RegularGridInterpolator
from scipy.optimize import minimize

from .dynamics import (IntegratorConfig, ParticleEnsemble, simulate, simulate_check_flow)
from .hamiltonian import FixedPointConfig, eval_fN, extend_check_a, solve_hat_a
from .model import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class ValueEstimate:
    value: float
    stderr: float = 0.0
    n_paths: int = 0
    method: str = "mc"

    def to_dict(self):
        return {"value": float(self.value), "stderr": float(self.stderr), "n_paths": int(self.n_paths),
                "method": self.method}


def _stderr(samples):
    samples = np.asarray(samples, dtype=float)
    if samples.size < 2:
        return 0.0
    return float(samples.std(ddof=1) / np.sqrt(samples.size))


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

def mc_cost_samples(spec, policy, cfg=IntegratorConfig(), n_paths=10_000, ens0=None):
    """Per-path realized cost ``int running + g(X_T)``."""
    if ens0 is None:
        ens0 = ParticleEnsemble.sample(spec, n_paths, cfg.seed)
    traj = simulate(spec, policy, ens0, cfg)
    return traj.running_cost + spec.terminal.value(traj.final)


def mc_cost(spec, policy, cfg=IntegratorConfig(), n_paths=10_000, ens0=None):
    """Monte Carlo estimate of the total cost under ``policy``."""
    J = mc_cost_samples(spec, policy, cfg, n_paths, ens0)
    return ValueEstimate(float(J.mean()), _stderr(J), J.size, "mc")


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------

def lq_matrices(spec):
    """``(Q, R, G)`` of an LQ instance, all of size ``Nd x Nd``."""
    if not spec.is_lq:
        raise ConfigurationError("Riccati solver needs f0 = 0, quadratic pairwise costs and a quadratic terminal cost")
    N, d = spec.n_agents, spec.dim
    K = spec.kappa
    Qa = (2.0 / N**2) * (np.diag(K.sum(axis=1)) - K)
    Q = np.kron(Qa, np.eye(d))
    R = np.eye(N * d) / N + Q
    return Q, R, np.asarray(spec.terminal.matrix, dtype=float)


@dataclass
class RiccatiSolution:
    times: np.ndarray
    P: np.ndarray
    s: np.ndarray
    Q: np.ndarray
    G: np.ndarray
    R_inv: np.ndarray
    n_agents: int
    dim: int
    _spline: object = field(default=None, repr=False)
    _s_spline: object = field(default=None, repr=False)

    def __post_init__(self):
        dP = np.einsum("tab,bc,tcd->tad", self.P, self.R_inv, self.P)
        self._spline = CubicHermiteSpline(self.times, self.P.reshape(len(self.times), -1),
                                          dP.reshape(len(self.times), -1))
        ds = -0.5 * np.trace(self.P, axis1=1, axis2=2)
        self._s_spline = CubicHermiteSpline(self.times, self.s, ds)

    def P_at(self, t):
        out = self._spline(t)
        n = self.P.shape[1]
        out = out.reshape(np.shape(t) + (n, n))
        return 0.5 * (out + np.swapaxes(out, -1, -2))

    def s_at(self, t):
        return self._s_spline(t)

    def blocks(self, t):
        N, d = self.n_agents, self.dim
        return self.P_at(t).reshape(N, d, N, d).transpose(0, 2, 1, 3)

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(x.shape[:-2] + (-1,))
        return 0.5 * np.einsum("...a,ab,...b->...", flat, self.P_at(t), flat) + float(self.s_at(t))

    def grad_field(self, t, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(x.shape[:-2] + (-1,))
        return (flat @ self.P_at(t)).reshape(x.shape)

    def feedback(self, t, x):
        """Optimal full-information control ``-R^{-1} P(t) x``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(x.shape[:-2] + (-1,))
        return -(flat @ (self.R_inv @ self.P_at(t)).T).reshape(x.shape)

    def feedback_policy(self):
        return lambda k, t, x: self.feedback(t, x)

    def lift(self, initial_law, t=None):
        t = self.times[0] if t is None else t
        m = initial_law.means().reshape(-1)
        Pt = self.P_at(t)
        N, d = self.n_agents, self.dim
        covs = initial_law.covariances()
        tr = sum(np.trace(Pt[i * d:(i + 1) * d, i * d:(i + 1) * d] @ covs[i]) for i in range(N))
        return 0.5 * m @ Pt @ m + 0.5 * tr + float(self.s_at(t))


def riccati_full(spec, n_steps=2000):
    """Backward RK4 for ``P`` and ``s`` in reversed time ``tau = T - t``."""
    Q, R, G = lq_matrices(spec)
    R_inv = np.linalg.inv(R)
    R_inv = 0.5 * (R_inv + R_inv.T)
    T, t0 = spec.horizon, spec.start_time
    tau = np.linspace(0.0, T - t0, n_steps + 1)
    h = tau[1] - tau[0] if n_steps else 0.0

    def rhs(P):
        return -P @ R_inv @ P, 0.5 * np.trace(P)

    Ps = [G.copy()]
    ss = [0.0]
    P, s = G.copy(), 0.0
    for _ in range(n_steps):
        k1, l1 = rhs(P)
        k2, l2 = rhs(P + 0.5 * h * k1)
        k3, l3 = rhs(P + 0.5 * h * k2)
        k4, l4 = rhs(P + h * k3)
        P = P + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        P = 0.5 * (P + P.T)
        s = s + h / 6 * (l1 + 2 * l2 + 2 * l3 + l4)
        Ps.append(P)
        ss.append(s)
    times = (T - tau)[::-1]
    return RiccatiSolution(times=times, P=np.stack(Ps[::-1]), s=np.array(ss[::-1]), Q=Q, G=G, R_inv=R_inv,
                           n_agents=spec.n_agents, dim=spec.dim)


class RiccatiCovector:
    """``q^i(t, x_i) = P_ii(t) x_i + sum_{j != i} P_ij(t) mean_j``.

    This is the derivative of the lifted value with respect to agent ``i``'s
    law, with the other agents' means read from the current ensemble.
    """

    def __init__(self, riccati):
        self.riccati = riccati

    def __call__(self, k, t, sites, ensemble):
        B = self.riccati.blocks(t)  # (N, N, d, d)
        N = B.shape[0]
        diag = B[np.arange(N), np.arange(N)]
        off = B.copy()
        off[np.arange(N), np.arange(N)] = 0.0
        ens = getattr(ensemble, "values", ensemble)
        mean = np.asarray(ens).mean(axis=0)
        return np.einsum("iab,qib->qia", diag, sites) + np.einsum("ijab,jb->ia", off, mean)[None]


# ---------------------------------------------------------------------------
# grid HJB
# ---------------------------------------------------------------------------

@dataclass
class GridSolution:
    axes: list
    V: np.ndarray
    time: float
    dt: float
    n_steps: int
    n_agents: int
    dim: int
    snapshot_times: Optional[np.ndarray] = None
    snapshots: Optional[np.ndarray] = None

    def snapshot_at(self, t):
        """Stored ``V(t', .)`` at the snapshot time closest to ``t``."""
        if self.snapshots is None:
            raise ValueError("grid solution has no time snapshots")
        return self.snapshots[int(np.argmin(np.abs(self.snapshot_times - t)))]

    def interpolator(self):
        return RegularGridInterpolator(self.axes, self.V, method="cubic" if self.V.ndim <= 2 else "linear")

    def value(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(x.shape[:-2] + (-1,))
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        if np.any(flat < lo - 1e-12) or np.any(flat > hi + 1e-12):
            raise ConfigurationError("evaluation point lies outside the grid box")
        return self.interpolator()(flat.reshape(-1, flat.shape[-1])).reshape(flat.shape[:-1])


def grid_hjb_full(spec, h=0.1, half_width=None, cfl=0.4, dt=None, fp_cfg=FixedPointConfig(), n_snapshots=0):
    """Explicit backward marching for ``-V_t - (1/2) Lap V + H(DV) = 0``.

    Central differences for the gradient and Laplacian, Neumann boundary
    through edge padding.  The box is centred on the initial means with
    half-width six standard deviations of ``X_T``.  With ``n_snapshots > 0``
    roughly that many intermediate time slices are kept (needed by
    :class:`GridCovector`).

    Raises
    ------
    ConfigurationError
        For ``N d > 3`` or when ``dt`` violates the stability limit.
    """
    N, d = spec.n_agents, spec.dim
    D = N * d
    if D > 3:
        raise ConfigurationError("grid HJB supports at most three state dimensions")
    tau = spec.remaining
    law = spec.initial_law
    centers = law.means().reshape(-1)
    if half_width is None:
        var0 = max(float(np.max(np.diagonal(law.covariances(), axis1=1, axis2=2))), 0.0)
        half_width = 6.0 * np.sqrt(tau + var0)
    n = int(np.ceil(half_width / h))
    axes = [c + h * np.arange(-n, n + 1) for c in centers]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    pts = mesh.reshape(-1, N, d)
    V = spec.terminal.value(pts).reshape(mesh.shape[:-1])

    # stability: diffusion limit plus a transport limit from |DH| = |a_hat|
    grad_T = spec.terminal.gradient(pts)
    speed = float(np.max(np.abs(solve_hat_a(spec, grad_T, fp_cfg).values), initial=0.0))
    limit = 1.0 / (D / h**2 + speed / h)
    if dt is None:
        dt = cfl * limit
    elif dt > limit:
        raise ConfigurationError(f"time step {dt:.3g} violates the stability limit; use dt <= {limit:.3g}")
    n_steps = max(1, int(np.ceil(tau / dt)))
    dt = tau / n_steps

    warm = None
    every = max(1, n_steps // n_snapshots) if n_snapshots else 0
    snaps, snap_t = [], []
    for step in range(n_steps):
        if every and step % every == 0:
            snaps.append(V.copy())
            snap_t.append(spec.horizon - step * dt)
        Vp = np.pad(V, 1, mode="edge")
        lap = np.zeros_like(V)
        grad = np.empty(V.shape + (D,))
        for ax in range(D):
            sl_p = [slice(1, -1)] * D
            sl_m = [slice(1, -1)] * D
            sl_p[ax] = slice(2, None)
            sl_m[ax] = slice(None, -2)
            up, dn = Vp[tuple(sl_p)], Vp[tuple(sl_m)]
            lap += (up - 2 * V + dn) / h**2
            grad[..., ax] = (up - dn) / (2 * h)
        p = grad.reshape(-1, N, d)
        res = solve_hat_a(spec, p, fp_cfg, a0=warm)
        warm = res.values
        Hval = -np.sum(p * warm + warm * warm / (2 * N), axis=(-1, -2))
        if not spec.interaction_free:
            Hval = Hval - eval_fN(spec, warm)
        V = V + dt * (0.5 * lap - Hval.reshape(V.shape))
    if every:
        snaps.append(V.copy())
        snap_t.append(spec.start_time)
    return GridSolution(axes=axes, V=V, time=spec.start_time, dt=dt, n_steps=n_steps, n_agents=N, dim=d,
                        snapshot_times=np.array(snap_t) if every else None,
                        snapshots=np.stack(snaps) if every else None)


class GridCovector:
    """Covector ``q^i(x_i) = E[D_i V(t, x_i, Y^{-i})]`` from a tabulated grid solution.

    The expectation runs over the first ``n_ref`` rows of the current
    ensemble; query points are clipped into the grid box.
    """

    def __init__(self, grid, n_ref=100):
        self.grid = grid
        self.n_ref = n_ref
        self._cache = {}

    def _grad_interp(self, t):
        idx = int(np.argmin(np.abs(self.grid.snapshot_times - t)))
        if idx not in self._cache:
            V = self.grid.snapshots[idx]
            spacing = [a[1] - a[0] for a in self.grid.axes]
            grads = np.gradient(V, *spacing, edge_order=2)
            if V.ndim == 1:
                grads = [grads]
            self._cache = {idx: [RegularGridInterpolator(self.grid.axes, g) for g in grads]}
        return self._cache[idx]

    def full_gradient(self, t, x):
        """``DV(t, x)`` for states ``x`` of shape ``(M, N, d)``, clipped into the box."""
        N, d = self.grid.n_agents, self.grid.dim
        interps = self._grad_interp(t)
        lo = np.array([a[0] for a in self.grid.axes]).reshape(N, d)
        hi = np.array([a[-1] for a in self.grid.axes]).reshape(N, d)
        pts = np.clip(x, lo, hi).reshape(-1, N * d)
        return np.stack([f(pts) for f in interps], axis=-1).reshape(x.shape)

    def __call__(self, k, t, sites, ensemble):
        N, d = self.grid.n_agents, self.grid.dim
        interps = self._grad_interp(t)
        ens = np.asarray(getattr(ensemble, "values", ensemble))[: self.n_ref]
        lo = np.array([a[0] for a in self.grid.axes]).reshape(N, d)
        hi = np.array([a[-1] for a in self.grid.axes]).reshape(N, d)
        Qn = sites.shape[0]
        out = np.empty_like(sites)
        for i in range(N):
            pts = np.broadcast_to(ens, (Qn,) + ens.shape).copy()
            pts[:, :, i, :] = sites[:, None, i, :]
            pts = np.clip(pts, lo, hi).reshape(-1, N * d)
            for c in range(d):
                out[:, i, c] = interps[i * d + c](pts).reshape(Qn, -1).mean(axis=1)
        return out


# ---------------------------------------------------------------------------
# lifted value
# ---------------------------------------------------------------------------

def lift_value(source, initial_law, t=None, n_quad=20):
    """Integral of ``V(t, .)`` against the product initial law.

    Closed form for a :class:`RiccatiSolution`; Gauss-Hermite quadrature on a
    :class:`GridSolution`; plain evaluation for any callable at a Dirac law.
    """
    if isinstance(source, RiccatiSolution):
        return float(source.lift(initial_law, t))
    if isinstance(source, GridSolution):
        fn = source.value
    elif callable(source):
        fn = source
    else:
        raise TypeError("source must be a RiccatiSolution, GridSolution or callable")
    N, d = initial_law.n_agents, initial_law.dim
    if initial_law.is_dirac:
        return float(fn(initial_law.means()[None])[0])
    x, w = np.polynomial.hermite_e.hermegauss(n_quad)
    w = w / w.sum()
    nodes, weights = [], []
    for b in initial_law.blocks:
        if b.kind == "dirac":
            nodes.append(np.zeros((1, d)) + b.mean)
            weights.append(np.ones(1))
            continue
        L = np.linalg.cholesky(b.covariance)
        grids = np.stack(np.meshgrid(*([x] * d), indexing="ij"), -1).reshape(-1, d)
        ww = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), -1).reshape(-1, d), axis=1)
        nodes.append(b.mean + grids @ L.T)
        weights.append(ww)
    idx = np.stack(np.meshgrid(*[np.arange(len(wi)) for wi in weights], indexing="ij"), -1).reshape(-1, N)
    pts = np.stack([nodes[i][idx[:, i]] for i in range(N)], axis=1)
    wts = np.prod(np.stack([weights[i][idx[:, i]] for i in range(N)], axis=1), axis=1)
    return float(np.sum(wts * fn(pts)))


# ---------------------------------------------------------------------------
# distributed LQ: affine ansatz and its exact value
# ---------------------------------------------------------------------------

def dist_lq_closed_form(spec, n_steps=4000):
    """Exact distributed value of an LQ instance with Gaussian or Dirac start.

    Mean part ``m0^T P m0 / 2`` from the full Riccati flow, plus for every
    agent ``tr(Pi_i S_i) / 2 + (1/2) int tr Pi_i`` with the scalar-gain flow
    ``Pi_i`` (closed form ``(G_ii^{-1} + (T - t)/R_ii)^{-1}``).
    """
    ric = riccati_full(spec, n_steps=n_steps)
    N, d = spec.n_agents, spec.dim
    _, R, G = lq_matrices(spec)
    tau = spec.remaining
    m0 = spec.initial_law.means().reshape(-1)
    covs = spec.initial_law.covariances()
    P0 = ric.P_at(spec.start_time)
    total = 0.5 * m0 @ P0 @ m0
    for i in range(N):
        sl = slice(i * d, (i + 1) * d)
        r = R[i * d, i * d]
        Gi = G[sl, sl]
        w, U = np.linalg.eigh(Gi)
        pis0 = np.where(w > 0, w / (1.0 + np.maximum(w, 0) * tau / r), 0.0)
        Pi0 = (U * pis0) @ U.T
        total += 0.5 * np.trace(Pi0 @ covs[i])
        # int_0^tau w / (1 + w u / r) du = r log(1 + w tau / r)
        total += 0.5 * float(np.sum(np.where(w > 0, r * np.log1p(np.maximum(w, 0) * tau / r), 0.0)))
    return total


@dataclass
class DistPolicyParams:
    knot_times: np.ndarray
    gains: np.ndarray    # (n_knots, N, d, d)
    offsets: np.ndarray  # (n_knots, N, d)
    grad_norm: float = 0.0
    converged: bool = True

    def _interp(self, t):
        t = float(np.clip(t, self.knot_times[0], self.knot_times[-1]))
        k = min(int(np.searchsorted(self.knot_times, t, side="right") - 1), len(self.knot_times) - 2)
        w = (t - self.knot_times[k]) / (self.knot_times[k + 1] - self.knot_times[k])
        K = (1 - w) * self.gains[k] + w * self.gains[k + 1]
        b = (1 - w) * self.offsets[k] + w * self.offsets[k + 1]
        return K, b

    def __call__(self, k, t, x):
        K, b = self._interp(t)
        return -np.einsum("iab,mib->mia", K, x) - b[None]


def _interp_weights(knots, t):
    """Matrix ``W`` with ``u(t) = W @ u_knots`` for piecewise-linear ``u``."""
    W = np.zeros((len(t), len(knots)))
    for r, tt in enumerate(t):
        k = min(max(int(np.searchsorted(knots, tt, side="right") - 1), 0), len(knots) - 2)
        w = (tt - knots[k]) / (knots[k + 1] - knots[k])
        W[r, k] = 1 - w
        W[r, k + 1] = w
    return W


class _MomentProblem:
    """Cost of the affine distributed feedback ``-K_i x_i - b_i`` from moment ODEs.

    State per agent: mean ``m_i`` and covariance ``S_i``.  The mean control
    ``abar_i = -K_i m_i - b_i`` drives the means; the fluctuation control
    ``-K_i (X_i - m_i)`` has second moment ``tr(K_i S_i K_i^T)``.  The running
    cost is ``abar^T R abar / 2 + sum_i R_ii tr(K_i S_i K_i^T) / 2``.  RK4 in
    time with an exact reverse sweep gives the gradient of the discrete cost.
    """

    def __init__(self, spec, n_knots, n_steps):
        self.N, self.d = spec.n_agents, spec.dim
        _, R, G = lq_matrices(spec)
        self.Rt = R[::self.d, ::self.d]  # agent-level matrix
        self.G = G
        N, d = self.N, self.d
        self.Gdiag = np.stack([G[i * d:(i + 1) * d, i * d:(i + 1) * d] for i in range(N)])
        self.m0 = spec.initial_law.means()
        self.S0 = spec.initial_law.covariances()
        self.knots = np.linspace(spec.start_time, spec.horizon, n_knots)
        self.t = np.linspace(spec.start_time, spec.horizon, n_steps + 1)
        self.h = self.t[1] - self.t[0]
        evals = np.concatenate([self.t, self.t[:-1] + 0.5 * self.h])
        W = _interp_weights(self.knots, evals)
        self.W_node, self.W_mid = W[: n_steps + 1], W[n_steps + 1:]
        self.n_knots = n_knots
        self.n_steps = n_steps

    def unpack(self, x):
        nk, N, d = self.n_knots, self.N, self.d
        K = x[: nk * N * d * d].reshape(nk, N, d, d)
        b = x[nk * N * d * d:].reshape(nk, N, d)
        return K, b

    def F(self, m, S, K, b):
        abar = -np.einsum("iab,ib->ia", K, m) - b
        dm = abar
        KS = K @ S
        dS = -KS - np.swapaxes(KS, -1, -2) + np.eye(self.d)
        fl = np.einsum("iab,iab->i", KS, K)  # tr(K S K^T)
        dc = 0.5 * np.einsum("ij,ia,ja->", self.Rt, abar, abar) + 0.5 * float(np.diag(self.Rt) @ fl)
        return dm, dS, dc

    def F_vjp(self, m, S, K, b, mbar, Sbar):
        """Cotangents of ``(m, S, K, b)`` for output cotangents ``(mbar, Sbar, cbar=1)``."""
        abar = -np.einsum("iab,ib->ia", K, m) - b
        rho = self.Rt @ abar
        g = mbar + rho
        m_out = -np.einsum("iba,ib->ia", K, g)
        K_out = -np.einsum("ia,ib->iab", g, m)
        b_out = -g
        Ssym = Sbar + np.swapaxes(Sbar, -1, -2)
        S_out = -np.swapaxes(K, -1, -2) @ Sbar - Sbar @ K
        K_out = K_out - Ssym @ S
        r = np.diag(self.Rt)[:, None, None]
        S_out = S_out + 0.5 * r * (np.swapaxes(K, -1, -2) @ K)
        K_out = K_out + r * (K @ S)
        return m_out, S_out, K_out, b_out

    def cost_and_grad(self, x):
        Kk, bk = self.unpack(x)
        Kn = np.einsum("tk,kiab->tiab", self.W_node, Kk)
        bn = np.einsum("tk,kia->tia", self.W_node, bk)
        Km = np.einsum("tk,kiab->tiab", self.W_mid, Kk)
        bm = np.einsum("tk,kia->tia", self.W_mid, bk)
        h = self.h
        m, S = self.m0.copy(), self.S0.copy()
        cost = 0.0
        tape = []
        for n in range(self.n_steps):
            u1, u2, u3 = (Kn[n], bn[n]), (Km[n], bm[n]), (Kn[n + 1], bn[n + 1])
            y1 = (m, S)
            k1 = self.F(*y1, *u1)
            y2 = (m + 0.5 * h * k1[0], S + 0.5 * h * k1[1])
            k2 = self.F(*y2, *u2)
            y3 = (m + 0.5 * h * k2[0], S + 0.5 * h * k2[1])
            k3 = self.F(*y3, *u2)
            y4 = (m + h * k3[0], S + h * k3[1])
            k4 = self.F(*y4, *u3)
            tape.append((y1, y2, y3, y4))
            m = m + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            S = S + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            cost += h / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        mf = m.reshape(-1)
        cost += 0.5 * mf @ self.G @ mf + 0.5 * float(np.einsum("iab,iba->", self.Gdiag, S))

        mbar = (self.G @ mf).reshape(m.shape)
        Sbar = 0.5 * np.swapaxes(self.Gdiag, -1, -2).copy()
        gKn, gbn = np.zeros_like(Kn), np.zeros_like(bn)
        gKm, gbm = np.zeros_like(Km), np.zeros_like(bm)
        for n in reversed(range(self.n_steps)):
            y1, y2, y3, y4 = tape[n]
            u1, u2, u3 = (Kn[n], bn[n]), (Km[n], bm[n]), (Kn[n + 1], bn[n + 1])
            w = (h / 6, h / 3, h / 3, h / 6)
            # the running-cost cotangent of each stage is its quadrature weight
            km4, kS4 = w[3] * mbar, w[3] * Sbar
            a4 = self.F_vjp(*y4, *u3, km4 / w[3], kS4 / w[3])
            a4 = tuple(w[3] * v for v in a4)
            gKn[n + 1] += a4[2]; gbn[n + 1] += a4[3]
            km3, kS3 = w[2] * mbar + h * a4[0], w[2] * Sbar + h * a4[1]
            a3 = self.F_vjp(*y3, *u2, km3 / w[2], kS3 / w[2])
            a3 = tuple(w[2] * v for v in a3)
            gKm[n] += a3[2]; gbm[n] += a3[3]
            km2, kS2 = w[1] * mbar + 0.5 * h * a3[0], w[1] * Sbar + 0.5 * h * a3[1]
            a2 = self.F_vjp(*y2, *u2, km2 / w[1], kS2 / w[1])
            a2 = tuple(w[1] * v for v in a2)
            gKm[n] += a2[2]; gbm[n] += a2[3]
            km1, kS1 = w[0] * mbar + 0.5 * h * a2[0], w[0] * Sbar + 0.5 * h * a2[1]
            a1 = self.F_vjp(*y1, *u1, km1 / w[0], kS1 / w[0])
            a1 = tuple(w[0] * v for v in a1)
            gKn[n] += a1[2]; gbn[n] += a1[3]
            mbar = mbar + a1[0] + a2[0] + a3[0] + a4[0]
            Sbar = Sbar + a1[1] + a2[1] + a3[1] + a4[1]
        gK = np.einsum("tk,tiab->kiab", self.W_node, gKn) + np.einsum("tk,tiab->kiab", self.W_mid, gKm)
        gb = np.einsum("tk,tia->kia", self.W_node, gbn) + np.einsum("tk,tia->kia", self.W_mid, gbm)
        return cost, np.concatenate([gK.ravel(), gb.ravel()])


def solve_dist_lq(spec, n_knots=20, n_steps=200, x0=None, gtol=1e-11, maxiter=5000):
    """Best affine distributed feedback ``-K_i(t) x_i - b_i(t)`` by L-BFGS.

    Gains and offsets are piecewise linear on ``n_knots`` uniform knots; the
    cost is computed exactly from the per-agent moment ODEs (RK4 with
    ``n_steps`` steps) together with its exact discrete gradient.

    Returns
    -------
    params : DistPolicyParams
    estimate : ValueEstimate
        Exact cost of the optimized affine feedback (``method='policy-opt'``).
    """
    if spec.initial_law.blocks[0].kind not in ("gaussian", "dirac") or any(
            b.kind not in ("gaussian", "dirac") for b in spec.initial_law.blocks):
        raise ConfigurationError("affine distributed optimizer needs Gaussian or Dirac initial laws")
    prob = _MomentProblem(spec, n_knots, n_steps)
    N, d = spec.n_agents, spec.dim
    if x0 is None:
        x0 = np.zeros(n_knots * N * d * (d + 1))
    res = minimize(prob.cost_and_grad, x0, jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "ftol": 1e-15, "maxiter": maxiter, "maxcor": 30})
    gnorm = float(np.linalg.norm(res.jac))
    converged = gnorm <= 1e-8
    if not converged:
        warnings.warn(f"affine distributed optimizer stalled: |grad| = {gnorm:.2e}, value {res.fun:.10g}",
                      RuntimeWarning, stacklevel=2)
    K, b = prob.unpack(res.x)
    params = DistPolicyParams(prob.knots, K.copy(), b.copy(), grad_norm=gnorm, converged=converged)
    return params, ValueEstimate(float(res.fun), 0.0, 0, "policy-opt")


# ---------------------------------------------------------------------------
# constructive distributed policy
# ---------------------------------------------------------------------------

class CheckPolicy:
    """Distributed feedback realized along a recorded check flow.

    Agent ``i`` at step ``k`` plays the distributed optimizer extended to its
    own state, with the other agents' controls frozen at the flow's tabulated
    fixed point of that step.
    """

    def __init__(self, spec, covector_source, flow, fp_cfg=FixedPointConfig()):
        self.spec = spec
        self.source = covector_source
        self.flow = flow
        self.fp_cfg = fp_cfg

    def __call__(self, k, t, x):
        ens_k = self.flow.states[k]
        q = self.source(k, t, x, ens_k)
        return extend_check_a(self.spec, q, self.flow.controls[k], self.fp_cfg)


def build_check_policy(spec, covector_source, ens0, cfg=IntegratorConfig(), fp_cfg=FixedPointConfig(),
                       n_eval=10_000, eval_seed=None, baseline=None):
    """Run the check flow, freeze its control fields and price them on fresh paths.

    Parameters
    ----------
    baseline : (policy, exact value), optional
        Control variate: the returned estimate is
        ``exact + mean(J_check - J_baseline)`` on common random numbers.

    Returns
    -------
    policy : CheckPolicy
    estimate : ValueEstimate
    flow : Trajectory
    """
    flow = simulate_check_flow(spec, covector_source, ens0, cfg, fp_cfg, record=True)
    policy = CheckPolicy(spec, covector_source, flow, fp_cfg)
    seed = cfg.seed + 1 if eval_seed is None else eval_seed
    eval_cfg = IntegratorConfig(n_steps=cfg.n_steps, seed=seed, antithetic=cfg.antithetic)
    fresh = ParticleEnsemble.sample(spec, n_eval, seed)
    J = mc_cost_samples(spec, policy, eval_cfg, n_eval, fresh)
    if baseline is None:
        return policy, ValueEstimate(float(J.mean()), _stderr(J), n_eval, "mc"), flow
    base_policy, exact = baseline
    Jb = mc_cost_samples(spec, base_policy, eval_cfg, n_eval, fresh)
    diff = J - Jb
    return policy, ValueEstimate(float(exact + diff.mean()), _stderr(diff), n_eval, "mc-cv"), flow
