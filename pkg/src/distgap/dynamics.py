"""
Euler-Maruyama time stepping for ``dX^i = alpha^i dt + dW^i``.

Two drivers are provided.  :func:`simulate` runs the N-agent system under a
given feedback, path by path.  :func:`simulate_check_flow` runs the
McKean-Vlasov particle system in which the drift at each step is the
distributed optimizer computed from the current empirical laws.

Policies are callables ``policy(k, t, x)`` mapping the step index, the time
and the states ``(M, N, d)`` to controls of the same shape.  Covector sources
for the flow are callables ``source(k, t, sites, ensemble)`` returning the
covectors ``q^i`` at ``sites`` (shape ``(Q, N, d)``, agent ``i`` reads column
``i``) given the current ensemble.

Randomness: the Brownian increment of step ``k`` is drawn from the substream
``default_rng([seed, k])``, so runs are reproducible and independent of how
steps are scheduled.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .hamiltonian import FixedPointConfig, NonConvergenceError, eval_fN, solve_check_a, solve_hat_a

logger = logging.getLogger(__name__)

COVECTOR_CONVENTION = "covector re-evaluated at each step time on the pre-step ensemble"


@dataclass
class ParticleEnsemble:
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError("ensemble values must have shape (M, N, d) with M >= 1")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ensemble contains non-finite entries")

    @property
    def n_paths(self):
        return self.values.shape[0]

    @classmethod
    def sample(cls, spec, n_paths, seed):
        rng = np.random.default_rng([int(seed), 2**31 - 1])
        return cls(spec.sample_initial(int(n_paths), rng), spec.start_time)

    @classmethod
    def point(cls, x0, n_paths, time=0.0):
        x0 = np.asarray(x0, dtype=float)
        return cls(np.broadcast_to(x0, (int(n_paths),) + x0.shape).copy(), time)


@dataclass(frozen=True)
class IntegratorConfig:
    n_steps: int = 200
    seed: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")


def brownian_increment(cfg, k, shape, dt):
    """Increment of step ``k``; antithetic mode stacks ``[Z, -Z]`` along paths."""
    rng = np.random.default_rng([int(cfg.seed), int(k)])
    M = shape[0]
    if cfg.antithetic:
        half = (M + 1) // 2
        z = rng.standard_normal((half,) + tuple(shape[1:]))
        z = np.concatenate([z, -z])[:M]
    else:
        z = rng.standard_normal(shape)
    return np.sqrt(dt) * z


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------

class ZeroPolicy:
    def __call__(self, k, t, x):
        return np.zeros_like(x)


class ConstantPolicy:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def __call__(self, k, t, x):
        return np.broadcast_to(self.v, x.shape).copy()


class FullInfoPolicy:
    """Wraps ``fn(t, x)`` with ``x`` of shape ``(M, N, d)``."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, k, t, x):
        return np.asarray(self.fn(t, x), dtype=float)


class DistributedPolicy:
    """Per-agent feedbacks ``fns[i](t, x_i)`` with ``x_i`` of shape ``(M, d)``."""

    def __init__(self, fns):
        self.fns = list(fns)

    def __call__(self, k, t, x):
        return np.stack([np.asarray(f(t, x[:, i, :]), dtype=float) for i, f in enumerate(self.fns)], axis=1)


class LinearFeedbackPolicy:
    """``alpha(t, x) = -K(t) x - b(t)`` on the flattened state."""

    def __init__(self, gain, offset=None):
        self.gain = gain
        self.offset = offset

    def __call__(self, k, t, x):
        flat = x.reshape(x.shape[0], -1)
        out = -flat @ np.asarray(self.gain(t)).T
        if self.offset is not None:
            out = out - np.asarray(self.offset(t))
        return out.reshape(x.shape)


class HatPolicy:
    """Full-information feedback ``a_hat(DV(t, x))`` from a gradient field."""

    def __init__(self, spec, grad_field, fp_cfg=FixedPointConfig()):
        self.spec = spec
        self.grad_field = grad_field
        self.fp_cfg = fp_cfg

    def __call__(self, k, t, x):
        return solve_hat_a(self.spec, self.grad_field(t, x), self.fp_cfg).values


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray
    final: np.ndarray
    running_cost: np.ndarray
    states: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    covectors: Optional[np.ndarray] = None
    convention: str = ""
    fp_iterations: list = field(default_factory=list)

    @property
    def n_paths(self):
        return self.final.shape[0]


def _grid(spec, ens0, cfg):
    t0 = ens0.time
    if not (spec.start_time - 1e-12 <= t0 <= spec.horizon):
        raise ValueError("ensemble time lies outside [start_time, horizon]")
    return np.linspace(t0, spec.horizon, cfg.n_steps + 1)


def simulate(spec, policy, ens0, cfg=IntegratorConfig(), record=False, record_controls=False):
    """Euler-Maruyama under ``policy`` with left-endpoint running cost.

    Returns a :class:`Trajectory`; ``running_cost[m]`` is the realized
    ``int (1/2N) sum |alpha_i|^2 + f(alpha) dt`` along path ``m``.
    """
    times = _grid(spec, ens0, cfg)
    N = spec.n_agents
    x = ens0.values.copy()
    M = x.shape[0]
    cost = np.zeros(M)
    states = [x.copy()] if record else None
    controls = [] if record_controls else None
    for k in range(cfg.n_steps):
        t, dt = times[k], times[k + 1] - times[k]
        try:
            alpha = np.asarray(policy(k, t, x), dtype=float)
        except NonConvergenceError:
            raise
        except Exception as exc:
            raise RuntimeError(f"policy evaluation failed at step {k}: {exc}") from exc
        if alpha.shape != x.shape:
            raise RuntimeError(f"policy returned shape {alpha.shape} at step {k}, expected {x.shape}")
        cost += dt * (np.sum(alpha * alpha, axis=(-1, -2)) / (2 * N) + eval_fN(spec, alpha))
        x = x + alpha * dt + brownian_increment(cfg, k, x.shape, dt)
        if record:
            states.append(x.copy())
        if record_controls:
            controls.append(alpha)
    return Trajectory(times=times, final=x, running_cost=cost,
                      states=np.stack(states) if record else None,
                      controls=np.stack(controls) if record_controls else None)


def simulate_check_flow(spec, covector_source, ens0, cfg=IntegratorConfig(), fp_cfg=FixedPointConfig(),
                        record=True):
    """Particle approximation of the McKean-Vlasov flow driven by ``a_check``.

    At step ``k`` the covectors are read from ``covector_source`` at time
    ``t_k`` on the pre-step ensemble, the distributed fixed point is solved
    there (warm-started from the previous step) and every particle moves with
    its own agent's control.  States, controls and covectors are recorded
    so the realized fields can be reused as a policy.
    """
    times = _grid(spec, ens0, cfg)
    N = spec.n_agents
    x = ens0.values.copy()
    M = x.shape[0]
    cost = np.zeros(M)
    states, controls, covectors, iters = [x.copy()], [], [], []
    warm = None
    logger.info("check flow: %s", COVECTOR_CONVENTION)
    for k in range(cfg.n_steps):
        t, dt = times[k], times[k + 1] - times[k]
        q = np.asarray(covector_source(k, t, x, x), dtype=float)
        try:
            res = solve_check_a(spec, q, x, fp_cfg, a0=warm)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"check flow aborted at step {k}: {exc}", exc.residual, exc.iterations) from exc
        alpha = res.values
        warm = alpha
        iters.append(res.report.iterations)
        cost += dt * (np.sum(alpha * alpha, axis=(-1, -2)) / (2 * N) + eval_fN(spec, alpha))
        x = x + alpha * dt + brownian_increment(cfg, k, x.shape, dt)
        if record:
            states.append(x.copy())
            controls.append(alpha)
            covectors.append(q)
    return Trajectory(times=times, final=x, running_cost=cost,
                      states=np.stack(states) if record else None,
                      controls=np.stack(controls) if record else None,
                      covectors=np.stack(covectors) if record else None,
                      convention=COVECTOR_CONVENTION, fp_iterations=iters)


def variance_along_flow(trajectory):
    """Per-time, per-agent, per-coordinate empirical variance, shape ``(n_times, N, d)``."""
    if trajectory.states is None:
        raise ValueError("trajectory was not recorded")
    return trajectory.states.var(axis=1)


def write_trajectory_csv(trajectory, path):
    """One row per (time, path, agent) followed by the ``d`` state columns."""
    if trajectory.states is None:
        raise ValueError("trajectory was not recorded")
    S = trajectory.states
    n_t, M, N, d = S.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "path", "agent"] + [f"x{c}" for c in range(d)])
        for k in range(n_t):
            for m in range(M):
                for i in range(N):
                    w.writerow([repr(float(trajectory.times[k])), m, i] + [repr(float(v)) for v in S[k, m, i]])
