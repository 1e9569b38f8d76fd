import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from distgap import cli, experiments
from distgap.experiments import RunConfig, derived_seed, fit_slope
from distgap.model import ConfigurationError, RadialCost, build_instance

SMALL = ["--n-list", "1,2", "--paths", "400", "--steps", "20"]


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_config_round_trip():
    cfg = RunConfig(name="x", n_list=(3, 5), dim=2, horizon=0.5, pairwise="pseudo_huber_pairwise(1.0, 0.5)",
                    terminal="huber_terminal(2.0, 0.5)", f0="lipschitz_f0(0.5, 1.0)", init="dirac_init(0.1)",
                    paths=123, flow_paths=45, steps=6, seed=2**63 + 5, tol=1e-9, max_iters=77, k1_prime=0.3,
                    kf_prime=2.5, n_probes=11, out="elsewhere")
    again = RunConfig.from_ini(cfg.to_ini())
    assert again == cfg
    assert RunConfig.from_ini(again.to_ini()) == again
    assert RunConfig.from_ini(RunConfig().to_ini()) == RunConfig().validate()


@pytest.mark.parametrize("text", ["[instance]\nbogus = 1\n", "[nowhere]\nx = 1\n",
                                  "[experiment]\nn_list =\n", "[experiment]\nn_list = 4,2\n",
                                  "[experiment]\npaths = many\n", "not an ini"])
def test_bad_configs_are_refused(text):
    with pytest.raises(ConfigurationError):
        RunConfig.from_ini(text)


def test_derived_seeds_are_distinct_and_stable():
    seeds = {derived_seed(7, N, s) for N in (1, 2, 4) for s in (0, 1)}
    assert len(seeds) == 6
    assert derived_seed(7, 2, 0) == derived_seed(7, 2, 0)


def test_exit_code_config_errors(tmp_path, capsys):
    assert cli.main(["gap-scan", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "seed" in capsys.readouterr().err
    assert cli.main(["bounds", "--n-list", "4,2", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["bounds", "--n-list", "", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert cli.main(["audit", "--seed", "1", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG


def test_exit_code_nonconvergence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(RunConfig(n_list=(2,), max_iters=1, tol=1e-14, pairwise="pseudo_huber_pairwise(1.0, 0.5)",
                             terminal="huber_terminal(1.0, 1.0)", f0="lipschitz_f0(0.5, 1.0)", paths=50,
                             flow_paths=20, steps=4, n_probes=5).to_ini())
    assert cli.main(["gap-scan", "--config", str(ini), "--seed", "1", "--out", str(tmp_path)]) == cli.EXIT_NONCONVERGENCE


def linear_profile_instance(self, n):
    lin = RadialCost(profile=lambda r: r, d1=lambda r: np.ones_like(r), d2=lambda r: 0 * r, d2_sup=0.0)
    return build_instance(n, 1, pairwise=lin)


def test_exit_code_audit(tmp_path, monkeypatch, capsys):
    args = ["audit", "--seed", "1", "--n-list", "2", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK
    monkeypatch.setattr(RunConfig, "instance", linear_profile_instance)
    assert cli.main(args) == cli.EXIT_PROPERTY
    assert "hhat'(0)=0" in capsys.readouterr().out
    assert not json.loads((tmp_path / "audit.json").read_text())["passed"]
    assert cli.main(["properties", *args[1:]]) == cli.EXIT_PROPERTY


def test_property_suite_aborts_on_failed_audit(monkeypatch):
    monkeypatch.setattr(RunConfig, "instance", linear_profile_instance)
    rep = experiments.run_property_suite(RunConfig(n_list=(2,), seed=1, n_probes=30))
    assert rep["aborted"] and not rep["passed"] and rep["results"] == []


def test_properties_pass_on_default_instance(tmp_path):
    args = ["properties", "--seed", "5", "--n-list", "3", "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_OK
    rep = json.loads((tmp_path / "properties.json").read_text())
    assert rep["passed"] and len(rep["results"]) >= 12


def test_properties_verdicts_stable_under_seed_change(tmp_path):
    verdicts = []
    for seed in (11, 12):
        rep = experiments.run_property_suite(RunConfig(n_list=(2,), seed=seed, n_probes=50, flow_paths=500))
        verdicts.append([(r["name"], r["passed"]) for r in rep["results"]])
    assert verdicts[0] == verdicts[1]


def test_single_N_scan_has_no_slope(tmp_path):
    assert cli.main(["gap-scan", "--seed", "2", "--n-list", "2", "--paths", "300", "--steps", "10",
                     "--out", str(tmp_path)]) == cli.EXIT_OK
    rows = read_csv(tmp_path / "gap_vs_N.csv")
    assert len(rows) == 1 and rows[0]["slope"] == ""
    assert json.loads((tmp_path / "report.json").read_text())["slope"] is None


def test_scan_csv_schema_and_slope(tmp_path):
    assert cli.main(["gap-scan", "--seed", "4", "--n-list", "2,3,4", "--paths", "400", "--steps", "20",
                     "--out", str(tmp_path)]) == cli.EXIT_OK
    with open(tmp_path / "gap_scan.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header == ["N", "V_full", "V_full_err", "V_dist_affine", "V_dist_affine_err", "V_dist_check",
                      "V_dist_check_err", "gap", "gap_err", "rhs_theorem", "wall_ms"]
    rows = read_csv(tmp_path / "gap_scan.csv")
    for r in rows:
        for k, v in r.items():
            assert math.isfinite(float(v)), k
            if k.endswith("_err"):
                assert float(v) >= 0
    N = np.array([float(r["N"]) for r in rows])
    gap = np.array([float(r["gap"]) for r in rows])
    slope = float(read_csv(tmp_path / "gap_vs_N.csv")[0]["slope"])
    A = np.vstack([np.log(N), np.ones_like(N)]).T
    assert slope == pytest.approx(np.linalg.lstsq(A, np.log(gap), rcond=None)[0][0], rel=1e-10)
    for name in ("eq_gronwall.csv", "constants.csv"):
        assert read_csv(tmp_path / name)


def test_fit_slope_edge_cases():
    assert fit_slope([2], [0.1]) is None
    assert fit_slope([2, 4], [0.1, -0.1]) is None
    assert fit_slope([1, 4], [1.0, 0.5]) == pytest.approx(-0.5)


def test_failed_row_does_not_stop_the_scan(monkeypatch):
    real = experiments._gap_row

    def flaky(cfg, N, timing):
        if N == 3:
            raise np.linalg.LinAlgError("synthetic")
        return real(cfg, N, timing)

    monkeypatch.setattr(experiments, "_gap_row", flaky)
    rep = experiments.run_gap_scan(RunConfig(n_list=(2, 3), seed=1, paths=200, flow_paths=100, steps=10))
    assert rep["rows"][0]["status"] == "ok" and rep["rows"][1]["status"] != "ok"
    assert rep["slope"] is None


def test_bounds_and_simulate_outputs(tmp_path):
    assert cli.main(["bounds", "--n-list", "2,4", "--out", str(tmp_path)]) == cli.EXIT_OK
    assert len(read_csv(tmp_path / "bounds.csv")) == 2
    assert cli.main(["simulate", "--seed", "1", "--n-list", "2", "--paths", "50", "--steps", "5",
                     "--dump-trajectory", "--out", str(tmp_path)]) == cli.EXIT_OK
    assert len(read_csv(tmp_path / "simulate.csv")) == 6
    assert len(read_csv(tmp_path / "trajectory.csv")) == 6 * 50 * 2


def test_timing_flag_fills_wall_time(tmp_path):
    args = ["gap-scan", "--seed", "1", "--n-list", "1", "--paths", "100", "--steps", "5", "--out", str(tmp_path)]
    assert cli.main(args + ["--timing"]) == cli.EXIT_OK
    assert float(read_csv(tmp_path / "gap_scan.csv")[0]["wall_ms"]) > 0


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "distgap", "bounds", "--n-list", "2", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "K1=" in out.stdout


@pytest.mark.parametrize("cmd", ["gap-scan", "simulate"])
def test_same_seed_same_bytes(tmp_path, cmd):
    files = {"gap-scan": ["gap_scan.csv", "gap_vs_N.csv", "eq_gronwall.csv"], "simulate": ["simulate.csv"]}[cmd]
    blobs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert cli.main([cmd, "--seed", "99", *SMALL, "--out", str(d)]) == cli.EXIT_OK
        blobs.append([(d / f).read_bytes() for f in files])
    assert blobs[0] == blobs[1]
