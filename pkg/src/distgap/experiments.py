"""
Experiment drivers behind the command line: configuration, gap scans,
property suites and CSV/JSON emission.

A run configuration is an INI file::

    [instance]
    dim = 1
    horizon = 1.0
    pairwise = quadratic_pairwise(0.5)
    terminal = quadratic_terminal(1.0)
    f0 = zero_f0
    init = gaussian_init(0.0, 0.0625)

    [experiment]
    name = gap-scan
    n_list = 2,4,8,16
    paths = 10000
    flow_paths = 2000
    steps = 100
    seed = 7

    [solver]
    tol = 1e-10
    max_iters = 10000
    k1_prime = 1.0
    kf_prime = 1.0
    n_probes = 200

    [output]
    out = out
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import bounds, dynamics, properties, value
from .hamiltonian import FixedPointConfig, NonConvergenceError
from .model import ConfigurationError, audit_assumptions, build_instance

logger = logging.getLogger(__name__)

GAP_COLUMNS = ["N", "V_full", "V_full_err", "V_dist_affine", "V_dist_affine_err", "V_dist_check",
               "V_dist_check_err", "gap", "gap_err", "rhs_theorem", "wall_ms"]

_SECTIONS = {
    "instance": ["dim", "horizon", "pairwise", "terminal", "f0", "init"],
    "experiment": ["name", "n_list", "paths", "flow_paths", "steps", "seed"],
    "solver": ["tol", "max_iters", "k1_prime", "kf_prime", "n_probes"],
    "output": ["out"],
}


@dataclass
class RunConfig:
    name: str = "gap-scan"
    n_list: tuple = (2, 4, 8, 16)
    dim: int = 1
    horizon: float = 1.0
    pairwise: str = "quadratic_pairwise(0.5)"
    terminal: str = "quadratic_terminal(1.0)"
    f0: str = "zero_f0"
    init: str = "gaussian_init(0.0, 0.0625)"
    paths: int = 10_000
    flow_paths: int = 2000
    steps: int = 100
    seed: Optional[int] = None
    tol: float = 1e-10
    max_iters: int = 10_000
    k1_prime: float = 1.0
    kf_prime: float = 1.0
    n_probes: int = 200
    out: str = "out"

    def validate(self):
        n = tuple(int(v) for v in self.n_list)
        if not n:
            raise ConfigurationError("n_list must not be empty")
        if any(v < 1 for v in n) or any(b <= a for a, b in zip(n, n[1:])):
            raise ConfigurationError("n_list must be positive and strictly increasing")
        if self.paths < 1 or self.flow_paths < 1 or self.steps < 1 or self.n_probes < 1:
            raise ConfigurationError("paths, flow_paths, steps and n_probes must be positive")
        if self.seed is not None and not (0 <= int(self.seed) < 2**64):
            raise ConfigurationError("seed must be an unsigned 64-bit integer")
        if not self.tol > 0:
            raise ConfigurationError("tol must be positive")
        object.__setattr__(self, "n_list", n)
        return self

    @property
    def fp_cfg(self):
        return FixedPointConfig(tol=self.tol, max_iters=self.max_iters)

    def instance(self, n_agents):
        return build_instance(n_agents, dim=self.dim, pairwise=self.pairwise, terminal=self.terminal,
                              f0=self.f0, init=self.init, horizon=self.horizon)

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        for sec, keys in _SECTIONS.items():
            cp[sec] = {}
            for k in keys:
                v = getattr(self, k)
                if k == "n_list":
                    v = ",".join(str(x) for x in v)
                elif v is None:
                    continue
                elif isinstance(v, float):
                    v = repr(v)
                cp[sec][k] = str(v)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text):
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        kwargs = {}
        defaults = cls()
        for sec in cp.sections():
            if sec not in _SECTIONS:
                raise ConfigurationError(f"unknown config section [{sec}]")
            for k, v in cp[sec].items():
                if k not in _SECTIONS[sec]:
                    raise ConfigurationError(f"unknown key {k!r} in [{sec}]")
                kwargs[k] = _coerce(k, v, getattr(defaults, k))
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_ini(fh.read())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if key == "n_list":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if key == "seed":
            return int(raw)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"bad value for {key}: {raw!r}") from exc
    return raw


def derived_seed(seed, n_agents, stream=0):
    """Independent per-``N`` seed so rows do not depend on scheduling."""
    return int(np.random.SeedSequence([int(seed), int(n_agents), int(stream)]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# gap scan
# ---------------------------------------------------------------------------

def _gap_row(cfg, N, timing):
    t0 = time.perf_counter()
    spec = cfg.instance(N)
    fp = cfg.fp_cfg
    seed = derived_seed(cfg.seed, N)
    icfg = dynamics.IntegratorConfig(n_steps=cfg.steps, seed=seed)
    ens0 = dynamics.ParticleEnsemble.sample(spec, cfg.flow_paths, seed)
    rec = {"N": N, "status": "ok"}
    report = bounds.bound_report(spec, K1_prime=cfg.k1_prime, Kf_prime=cfg.kf_prime)
    rec["bounds"] = report.to_dict()
    if spec.is_lq:
        ric = value.riccati_full(spec)
        V_full = value.ValueEstimate(ric.lift(spec.initial_law), 0.0, 0, "riccati")
        params, V_aff = value.solve_dist_lq(spec)
        rec["affine_grad_norm"] = params.grad_norm
        rec["V_dist_exact"] = value.dist_lq_closed_form(spec)
        cov = value.RiccatiCovector(ric)
        _, V_chk, flow = value.build_check_policy(spec, cov, ens0, icfg, fp, n_eval=cfg.paths,
                                                  baseline=(ric.feedback_policy(), V_full.value))
        gron = bounds.check_gronwall_EQ(spec, ric, flow, bounds.bound_inputs(spec, cfg.k1_prime, cfg.kf_prime))
        rec["gronwall"] = [asdict(r) for r in gron]
        gap, gap_err = V_aff.value - V_full.value, 0.0
    else:
        if spec.n_agents * spec.dim > 3:
            raise ConfigurationError("compliant instances are valued on a grid, which needs N d <= 3")
        grid = value.grid_hjb_full(spec, h=0.1, fp_cfg=fp, n_snapshots=cfg.steps)
        V_full = value.ValueEstimate(value.lift_value(grid, spec.initial_law), 0.0, 0, "grid")
        V_aff = None
        cov = value.GridCovector(grid)
        baseline = dynamics.HatPolicy(spec, cov.full_gradient, fp)
        _, V_chk, flow = value.build_check_policy(spec, cov, ens0, icfg, fp, n_eval=cfg.paths,
                                                  baseline=(baseline, V_full.value))
        gap, gap_err = V_chk.value - V_full.value, V_chk.stderr
    rec["V_full"] = V_full.to_dict()
    rec["V_dist_affine"] = None if V_aff is None else V_aff.to_dict()
    rec["V_dist_check"] = V_chk.to_dict()
    rec["gap"] = gap
    rec["gap_err"] = gap_err
    rec["flow_convention"] = flow.convention
    rec["wall_ms"] = (time.perf_counter() - t0) * 1e3 if timing else 0.0
    return rec


def _safe_gap_row(args):
    cfg, N, timing = args
    try:
        return _gap_row(cfg, N, timing)
    except NonConvergenceError as exc:
        return {"N": N, "status": f"failed: non-convergence: {exc}", "nonconvergence": True}
    except (ConfigurationError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        return {"N": N, "status": f"failed: {exc}"}


def fit_slope(N, gap):
    """Least-squares slope of ``log gap`` on ``log N`` (None without two positive gaps)."""
    N = np.asarray(N, dtype=float)
    gap = np.asarray(gap, dtype=float)
    keep = gap > 0
    if keep.sum() < 2:
        return None
    return float(np.polyfit(np.log(N[keep]), np.log(gap[keep]), 1)[0])


def run_gap_scan(cfg, parallel=False, timing=False):
    """Values, gap and theorem bound for every ``N`` in the scan.

    Returns the JSON-ready report dictionary.
    """
    cfg.validate()
    if cfg.seed is None:
        raise ConfigurationError("gap scan is stochastic and needs a seed")
    jobs = [(cfg, N, timing) for N in cfg.n_list]
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor() as pool:
            rows = list(pool.map(_safe_gap_row, jobs))
    else:
        rows = [_safe_gap_row(j) for j in jobs]
    ok = [r for r in rows if r["status"] == "ok"]
    slope = fit_slope([r["N"] for r in ok], [r["gap"] for r in ok]) if len(ok) > 1 else None
    return {"experiment": "gap-scan", "seed": cfg.seed, "config": cfg.to_ini(), "rows": rows, "slope": slope}


def gap_csv_rows(report):
    out = []
    for r in report["rows"]:
        if r["status"] != "ok":
            continue
        aff = r["V_dist_affine"]
        out.append({"N": r["N"], "V_full": r["V_full"]["value"], "V_full_err": r["V_full"]["stderr"],
                    "V_dist_affine": "" if aff is None else aff["value"],
                    "V_dist_affine_err": "" if aff is None else aff["stderr"],
                    "V_dist_check": r["V_dist_check"]["value"], "V_dist_check_err": r["V_dist_check"]["stderr"],
                    "gap": r["gap"], "gap_err": r["gap_err"], "rhs_theorem": r["bounds"]["rhs_theorem"],
                    "wall_ms": r["wall_ms"]})
    return out


def _fmt(v):
    if v == "" or v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def write_csv(path, columns, rows, header_notes=()):
    try:
        with open(path, "w", newline="") as fh:
            for note in header_notes:
                fh.write(f"# {note}\n")
            w = csv.writer(fh)
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(r[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj):
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def emit_plot_data(report, out_dir):
    """Write plot-ready CSVs for a gap-scan report; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    rows = [r for r in report["rows"] if r["status"] == "ok"]
    slope = report.get("slope")
    written = []

    p = os.path.join(out_dir, "gap_vs_N.csv")
    cols = ["N", "gap", "gap_err", "gap_sqrtN", "gap_sqrtN_err", "slope"]
    data = [{"N": r["N"], "gap": r["gap"], "gap_err": r["gap_err"], "gap_sqrtN": r["gap"] * math.sqrt(r["N"]),
             "gap_sqrtN_err": r["gap_err"] * math.sqrt(r["N"]), "slope": "" if slope is None else slope}
            for r in rows]
    write_csv(p, cols, data, ["gap = V_dist - V in cost units; *_err are one standard error",
                              "slope = least-squares slope of log(gap) on log(N); empty without a fit"])
    written.append(p)

    p = os.path.join(out_dir, "eq_gronwall.csv")
    cols = ["N", "time", "EQ", "EQ_err", "rhs", "rhs_err", "passed"]
    data = [{"N": r["N"], "time": g["time"], "EQ": g["EQ"], "EQ_err": g["EQ_err"], "rhs": g["rhs"],
             "rhs_err": g["rhs_err"], "passed": int(g["passed"])} for r in rows for g in r.get("gronwall", [])]
    write_csv(p, cols, data, ["E_Q along the check flow against its Gronwall envelope (LQ rows only)"])
    written.append(p)

    p = os.path.join(out_dir, "constants.csv")
    cols = ["N", "K1", "Kf", "Kg", "rhs_theorem", "C_p", "M"]
    data = [{"N": r["N"], "K1": r["bounds"]["K1"], "Kf": r["bounds"]["Kf"], "Kg": r["bounds"]["Kg"],
             "rhs_theorem": r["bounds"]["rhs_theorem"], "C_p": r["bounds"]["C_p"],
             "M": "" if r["bounds"]["M"] is None else r["bounds"]["M"]} for r in rows]
    write_csv(p, cols, data, ["theorem constants at the start time; M only when K_G is declared"])
    written.append(p)
    return written


# ---------------------------------------------------------------------------
# property suite
# ---------------------------------------------------------------------------

def run_property_suite(cfg):
    """Audit the instance at the first ``N``, then run every property check.

    Returns ``{"audit": ..., "results": [...], "passed": bool}``; the suite
    stops after a failed audit.
    """
    cfg.validate()
    if cfg.seed is None:
        raise ConfigurationError("property suite is randomized and needs a seed")
    N = cfg.n_list[0]
    spec = cfg.instance(N)
    audit = audit_assumptions(spec, cfg.n_probes, cfg.seed)
    out = {"N": N, "audit": audit.to_dict(), "results": [], "passed": audit.passed}
    if not audit.passed:
        out["aborted"] = "audit failed"
        return out
    rng = np.random.default_rng([cfg.seed, 99])
    fp = cfg.fp_cfg
    n = cfg.n_probes
    n_sites = min(n, 200) if spec.kappa is None or not spec.f0.is_zero else n
    res = [
        properties.hat_a_lipschitz(spec, n, rng, fp),
        properties.check_a_site_lipschitz(spec, n_sites, rng, fp),
        properties.check_a_bounded(spec, 10, n_sites, rng, fp),
        properties.phi_monotone(spec, n, rng, fp),
        properties.envelope_matches_fd(spec, min(n, 20), rng),
        properties.single_site_consistency(spec, min(n, 20), rng, fp),
        properties.dist_below_full_hamiltonian(spec, n_sites, rng, fp),
        properties.zero_policy_moments(spec, 4000, cfg.seed),
        properties.simulation_determinism(spec, 100, cfg.seed),
        properties.riccati_eigen_bounds(spec),
        properties.lq_ordering(spec),
        properties.lipschitz_value_grid(spec, n, rng),
    ]
    res += properties.check_flow_estimates(spec, min(cfg.flow_paths, 2000), min(cfg.steps, 50), cfg.seed, fp)
    out["results"] = [r.to_dict() for r in res]
    out["passed"] = all(r.passed for r in res)
    return out


def run_bounds(cfg):
    cfg.validate()
    rows = []
    for N in cfg.n_list:
        spec = cfg.instance(N)
        rows.append(bounds.bound_report(spec, K1_prime=cfg.k1_prime, Kf_prime=cfg.kf_prime).to_dict())
    return {"experiment": "bounds", "config": cfg.to_ini(), "rows": rows}


def run_audit(cfg):
    cfg.validate()
    reports = {}
    for N in cfg.n_list:
        reports[str(N)] = audit_assumptions(cfg.instance(N), cfg.n_probes, 0 if cfg.seed is None else cfg.seed).to_dict()
    return {"experiment": "audit", "reports": reports, "passed": all(r["passed"] for r in reports.values())}


def run_simulate(cfg, policy_name="optimal"):
    """Simulate the first ``N`` of the scan under a simple policy and summarize the cost."""
    cfg.validate()
    if cfg.seed is None:
        raise ConfigurationError("simulation is stochastic and needs a seed")
    N = cfg.n_list[0]
    spec = cfg.instance(N)
    icfg = dynamics.IntegratorConfig(n_steps=cfg.steps, seed=derived_seed(cfg.seed, N, 1))
    ens0 = dynamics.ParticleEnsemble.sample(spec, cfg.paths, icfg.seed)
    if policy_name == "optimal" and spec.is_lq:
        pol = value.riccati_full(spec).feedback_policy()
    elif policy_name in ("zero", "optimal"):
        pol = dynamics.ZeroPolicy()
        policy_name = "zero"
    else:
        raise ConfigurationError(f"unknown policy {policy_name!r}")
    traj = dynamics.simulate(spec, pol, ens0, icfg, record=True)
    J = traj.running_cost + spec.terminal.value(traj.final)
    var = dynamics.variance_along_flow(traj)
    rows = [{"time": traj.times[k], "mean_x": float(traj.states[k].mean()), "var_x": float(var[k].mean())}
            for k in range(len(traj.times))]
    return {"experiment": "simulate", "N": N, "policy": policy_name,
            "cost": value.ValueEstimate(float(J.mean()), value._stderr(J), J.size, "mc").to_dict(),
            "rows": rows, "trajectory": traj}
