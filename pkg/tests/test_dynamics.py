import numpy as np
import pytest

from distgap.bounds import propagated_poincare
from distgap.dynamics import (ConstantPolicy, DistributedPolicy, HatPolicy, IntegratorConfig, LinearFeedbackPolicy,
                              ParticleEnsemble, ZeroPolicy, simulate, simulate_check_flow, variance_along_flow,
                              write_trajectory_csv)
from distgap.hamiltonian import FixedPointConfig
from distgap.model import build_instance
from distgap.value import RiccatiCovector, riccati_full


@pytest.fixture
def free2():
    return build_instance(2, 2, pairwise="quadratic_pairwise(0.0)", terminal="quadratic_terminal(1.0)",
                          init="dirac_init(0.0)")


def test_zero_policy_brownian_statistics(free2):
    x0 = np.array([[1.0, -2.0], [0.5, 0.0]])
    ens = ParticleEnsemble.point(x0, 20_000)
    tr = simulate(free2, ZeroPolicy(), ens, IntegratorConfig(n_steps=50, seed=3))
    se_mean = np.sqrt(1.0 / 20_000)
    assert np.all(np.abs(tr.final.mean(axis=0) - x0) <= 3 * se_mean)
    var = tr.final.var(axis=0, ddof=1)
    assert np.all(np.abs(var - 1.0) <= 3 * np.sqrt(2 / 19_999))


def test_constant_policy_displacement(free2):
    v = np.array([[0.3, -0.1], [0.0, 1.0]])
    ens = ParticleEnsemble.point(np.zeros((2, 2)), 4000)
    cfg = IntegratorConfig(n_steps=40, seed=1, antithetic=True)
    tr = simulate(free2, ConstantPolicy(v), ens, cfg)
    assert np.allclose(tr.final.mean(axis=0), v * 1.0, atol=1e-12)
    # running cost of a constant control: (1/2N) sum |v|^2 over the horizon
    assert np.allclose(tr.running_cost, np.sum(v * v) / 4)


def test_same_seed_same_bits(lq4):
    ens = ParticleEnsemble.sample(lq4, 300, 9)
    ric = riccati_full(lq4)
    a = simulate(lq4, ric.feedback_policy(), ens, IntegratorConfig(30, 9), record=True)
    b = simulate(lq4, ric.feedback_policy(), ens, IntegratorConfig(30, 9), record=True)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.running_cost, b.running_cost)
    c = simulate(lq4, ric.feedback_policy(), ens, IntegratorConfig(30, 10))
    assert not np.array_equal(a.final, c.final)


def test_antithetic_zero_policy_mean_is_exact(free2):
    ens = ParticleEnsemble.point(np.ones((2, 2)), 1000)
    tr = simulate(free2, ZeroPolicy(), ens, IntegratorConfig(7, 2, antithetic=True))
    assert np.allclose(tr.final.mean(axis=0), 1.0, atol=1e-13)


def test_weak_error_smooth_test_function(free2):
    """E cos(x0 + W_1) = cos(x0) exp(-1/2)."""
    x0 = np.array([[0.4, 0.0], [0.0, 0.0]])
    ens = ParticleEnsemble.point(x0, 50_000)
    tr = simulate(free2, ZeroPolicy(), ens, IntegratorConfig(10, 5))
    phi = np.cos(tr.final[:, 0, 0])
    assert abs(phi.mean() - np.cos(0.4) * np.exp(-0.5)) <= 3 * phi.std() / np.sqrt(phi.size)


def test_policy_wrappers_agree(lq4, rng):
    x = rng.normal(size=(10, 4, 1))
    ric = riccati_full(lq4)
    lin = LinearFeedbackPolicy(lambda t: ric.R_inv @ ric.P_at(t))
    assert np.allclose(lin(0, 0.3, x), ric.feedback(0.3, x))
    hat = HatPolicy(lq4, ric.grad_field)
    assert np.allclose(hat(0, 0.3, x), ric.feedback(0.3, x), atol=1e-8)
    dist = DistributedPolicy([lambda t, y, i=i: -(i + 1) * y for i in range(4)])
    assert np.allclose(dist(0, 0.0, x), -x * np.arange(1, 5)[None, :, None])


def test_policy_failure_reports_step(lq4):
    def bad(k, t, x):
        if k == 3:
            raise ValueError("boom")
        return np.zeros_like(x)
    with pytest.raises(RuntimeError, match="step 3"):
        simulate(lq4, bad, ParticleEnsemble.sample(lq4, 5, 0), IntegratorConfig(5, 0))


def test_check_flow_without_interaction_equals_decoupled_feedback(rng):
    spec = build_instance(3, 1, pairwise="quadratic_pairwise(0.0)", terminal="quadratic_terminal(1.0)",
                          init="gaussian_init(0.0, 0.5)")
    ric = riccati_full(spec)
    ens = ParticleEnsemble.sample(spec, 500, 4)
    cfg = IntegratorConfig(40, 4)
    flow = simulate_check_flow(spec, RiccatiCovector(ric), ens, cfg)
    direct = simulate(spec, ric.feedback_policy(), ens, cfg)
    assert np.allclose(flow.final, direct.final, atol=1e-12)
    assert np.allclose(flow.running_cost, direct.running_cost, atol=1e-12)


def test_check_flow_single_particle_is_full_information(lq4):
    ric = riccati_full(lq4)
    ens = ParticleEnsemble.sample(lq4, 1, 6)
    cfg = IntegratorConfig(25, 6)
    flow = simulate_check_flow(lq4, RiccatiCovector(ric), ens, cfg, FixedPointConfig(tol=1e-13))
    full = simulate(lq4, HatPolicy(lq4, ric.grad_field, FixedPointConfig(tol=1e-13)), ens, cfg)
    assert np.allclose(flow.final, full.final, atol=1e-9)
    assert "re-evaluated" in flow.convention


def test_check_flow_exchangeable_means(lq4):
    ric = riccati_full(lq4)
    ens = ParticleEnsemble.sample(lq4, 4000, 8)
    flow = simulate_check_flow(lq4, RiccatiCovector(ric), ens, IntegratorConfig(20, 8))
    means = flow.final.mean(axis=0).ravel()
    se = flow.final.std(axis=0).ravel() / np.sqrt(4000)
    assert np.max(means) - np.min(means) <= 3 * np.sqrt(2) * se.max()


def test_variance_from_dirac_start(free2):
    ens = ParticleEnsemble.point(np.zeros((2, 2)), 20_000)
    tr = simulate(free2, ZeroPolicy(), ens, IntegratorConfig(20, 11), record=True)
    var = variance_along_flow(tr)
    assert var.shape == (21, 2, 2)
    assert np.allclose(var.mean(axis=(1, 2)), tr.times, atol=0.03)


def test_propagated_constant_limit():
    assert propagated_poincare(1.0, 0.0, 0.7) == pytest.approx(1.7)
    assert propagated_poincare(1.0, 1e-9, 0.7) == pytest.approx(1.7, rel=1e-7)


def test_ou_variance_below_poincare_envelope():
    """Contractive linear drift -k x keeps Var below c_p + (s - t) (the C_G -> 0 envelope)."""
    spec = build_instance(1, 1, pairwise="quadratic_pairwise(0.0)", init="gaussian_init(0.0, 0.5)")
    k = 0.8
    ens = ParticleEnsemble.sample(spec, 40_000, 2)
    tr = simulate(spec, LinearFeedbackPolicy(lambda t: np.array([[k]])), ens, IntegratorConfig(50, 2), record=True)
    var = variance_along_flow(tr)[:, 0, 0]
    s = tr.times
    exact = 0.5 * np.exp(-2 * k * s) + (1 - np.exp(-2 * k * s)) / (2 * k)
    assert np.allclose(var, exact, atol=0.02)
    assert np.all(var <= np.array([propagated_poincare(0.5, 0.0, si) for si in s]) + 0.02)


def test_trajectory_csv(tmp_path, lq4):
    tr = simulate(lq4, ZeroPolicy(), ParticleEnsemble.sample(lq4, 3, 0), IntegratorConfig(2, 0), record=True)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(tr, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "time,path,agent,x0"
    assert len(lines) == 1 + 3 * 3 * 4
