"""Command line entry point: ``distgap <subcommand> [options]``.

Exit codes: 0 all checks pass, 1 a property or audit failed, 2 bad
configuration, 3 a fixed-point solver did not converge.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import __version__, experiments
from .dynamics import write_trajectory_csv
from .hamiltonian import NonConvergenceError
from .model import ConfigurationError

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2, 3
STOCHASTIC = {"audit", "gap-scan", "properties", "simulate"}


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="master seed (required for stochastic subcommands)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--n-list", metavar="2,4,8,16", help="comma-separated, strictly increasing agent counts")
    common.add_argument("--paths", type=int, help="Monte Carlo paths")
    common.add_argument("--steps", type=int, help="time steps on [t, T]")
    common.add_argument("--parallel", action="store_true", help="run the N values in separate processes")
    common.add_argument("--timing", action="store_true", help="record wall time (makes CSV output run-dependent)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="distgap", description="Distributed versus full-information control gap harness.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("audit", parents=[common], help="audit the standing assumptions")
    sub.add_parser("gap-scan", parents=[common], help="values and gap for every N")
    sub.add_parser("properties", parents=[common], help="randomized property suite")
    sub.add_parser("bounds", parents=[common], help="theorem constants for every N")
    sim = sub.add_parser("simulate", parents=[common], help="simulate the first N under a policy")
    sim.add_argument("--policy", default="optimal", choices=["optimal", "zero"])
    sim.add_argument("--dump-trajectory", action="store_true", help="also write one row per (time, path, agent)")
    return p


def _config(args):
    cfg = experiments.RunConfig.load(args.config) if args.config else experiments.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.n_list is not None:
        try:
            cfg.n_list = tuple(int(x) for x in args.n_list.split(",") if x.strip())
        except ValueError as exc:
            raise ConfigurationError(f"bad --n-list {args.n_list!r}") from exc
    if args.paths is not None:
        cfg.paths = args.paths
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.name = args.command
    if args.command in STOCHASTIC and cfg.seed is None:
        raise ConfigurationError(f"'{args.command}' is stochastic: pass --seed or set seed in the config")
    return cfg.validate()


def _print_results(results):
    for r in results:
        tag = "SKIP" if r.get("skipped") else ("PASS" if r["passed"] else "FAIL")
        print(f"[{tag}] {r['name']}: {r.get('detail', '')}")


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        os.makedirs(cfg.out, exist_ok=True)
        return _dispatch(args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


def _dispatch(args, cfg):
    out = cfg.out
    cmd = args.command
    if cmd == "audit":
        rep = experiments.run_audit(cfg)
        experiments.write_json(os.path.join(out, "audit.json"), rep)
        for N, r in rep["reports"].items():
            for it in r["items"]:
                if not it["passed"]:
                    print(f"[FAIL] N={N} {it['name']}: worst {it['worst']:.4g} vs declared {it['declared']:.4g}")
        print(f"audit {'passed' if rep['passed'] else 'failed'}")
        return EXIT_OK if rep["passed"] else EXIT_PROPERTY

    if cmd == "gap-scan":
        rep = experiments.run_gap_scan(cfg, parallel=args.parallel, timing=args.timing)
        rows = experiments.gap_csv_rows(rep)
        experiments.write_csv(os.path.join(out, "gap_scan.csv"), experiments.GAP_COLUMNS, rows)
        experiments.emit_plot_data(rep, out)
        experiments.write_json(os.path.join(out, "report.json"), {**rep, "version": __version__})
        for r in rep["rows"]:
            if r["status"] == "ok":
                print(f"N={r['N']:>3}  V={r['V_full']['value']:.8f}  V_dist={r['V_dist_check']['value']:.8f}"
                      f"  gap={r['gap']:.3e}  rhs={r['bounds']['rhs_theorem']:.3e}")
            else:
                print(f"N={r['N']:>3}  {r['status']}")
        if rep["slope"] is not None:
            print(f"log-log slope of gap vs N: {rep['slope']:.3f}")
        if any(r.get("nonconvergence") for r in rep["rows"]):
            return EXIT_NONCONVERGENCE
        return EXIT_OK if all(r["status"] == "ok" for r in rep["rows"]) else EXIT_PROPERTY

    if cmd == "properties":
        rep = experiments.run_property_suite(cfg)
        experiments.write_json(os.path.join(out, "properties.json"), rep)
        if rep.get("aborted"):
            for it in rep["audit"]["items"]:
                if not it["passed"]:
                    print(f"[FAIL] audit {it['name']}: worst {it['worst']:.4g}")
            print("audit failed; property tests not run")
        _print_results(rep["results"])
        return EXIT_OK if rep["passed"] else EXIT_PROPERTY

    if cmd == "bounds":
        rep = experiments.run_bounds(cfg)
        cols = ["n_agents", "C_G", "c_p", "C_p", "K1", "Kf", "Kg", "rhs_theorem"]
        experiments.write_csv(os.path.join(out, "bounds.csv"), cols, rep["rows"])
        experiments.write_json(os.path.join(out, "bounds.json"), rep)
        for r in rep["rows"]:
            print(f"N={r['n_agents']:>3}  K1={r['K1']:.4g}  Kf={r['Kf']:.4g}  Kg={r['Kg']:.4g}  rhs={r['rhs_theorem']:.4g}")
        return EXIT_OK

    if cmd == "simulate":
        rep = experiments.run_simulate(cfg, args.policy)
        traj = rep.pop("trajectory")
        experiments.write_csv(os.path.join(out, "simulate.csv"), ["time", "mean_x", "var_x"], rep["rows"])
        experiments.write_json(os.path.join(out, "simulate.json"), rep)
        if args.dump_trajectory:
            write_trajectory_csv(traj, os.path.join(out, "trajectory.csv"))
        c = rep["cost"]
        print(f"N={rep['N']} policy={rep['policy']} cost={c['value']:.6f} +- {c['stderr']:.2e}")
        return EXIT_OK
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
