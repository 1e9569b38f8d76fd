import numpy as np
import pytest
from scipy.optimize import minimize

from distgap.hamiltonian import (FixedPointConfig, NonConvergenceError, envelope_grad_H, eval_fN, extend_check_a,
                                 full_objective, grad_fN, hamiltonian_dist, hamiltonian_full, project_to_ball,
                                 solve_check_a, solve_hat_a)
from distgap.model import build_instance

from .conftest import quarter_square


@pytest.fixture
def two():
    return build_instance(2, 1, pairwise=quarter_square(), init="dirac_init(0.0)")


@pytest.fixture
def free4():
    return build_instance(4, 1, pairwise="quadratic_pairwise(0.0)", init="dirac_init(0.0)")


def test_eval_fN_examples(two, generic3, rng):
    assert eval_fN(two, np.array([[1.0], [-1.0]])) == pytest.approx(0.5)
    assert eval_fN(generic3, np.zeros((3, 2))) == pytest.approx(float(generic3.f0.value(np.zeros(2))))
    v = rng.normal(size=2)
    same = np.tile(v, (3, 1))
    assert eval_fN(generic3, same) == pytest.approx(float(generic3.f0.value(v)))


def test_quadratic_fast_path_matches_generic(rng):
    fast = build_instance(5, 2, pairwise="quadratic_pairwise(0.5)")
    from distgap.model import RadialCost
    slow_h = RadialCost(profile=lambda r: 0.25 * r * r, d1=lambda r: 0.5 * r, d2=lambda r: 0.5 + 0 * r, d2_sup=0.5)
    slow = build_instance(5, 2, pairwise=slow_h)
    a = rng.normal(size=(7, 5, 2))
    assert np.allclose(eval_fN(fast, a), eval_fN(slow, a))
    assert np.allclose(grad_fN(fast, a), grad_fN(slow, a))


def test_grad_fN_examples(two, generic3, rng):
    assert np.allclose(grad_fN(two, np.array([[1.0], [0.0]])).ravel(), [0.25, -0.25])
    assert np.allclose(grad_fN(two, np.full((2, 1), 3.0)), 0.0)
    a = rng.normal(size=(3, 2))
    fd = np.zeros_like(a)
    for i in range(3):
        for c in range(2):
            e = np.zeros_like(a)
            e[i, c] = 1e-6
            fd[i, c] = (eval_fN(generic3, a + e) - eval_fN(generic3, a - e)) / 2e-6
    assert np.allclose(grad_fN(generic3, a), fd, rtol=1e-5, atol=1e-9)


def test_hat_a_two_agent_oracle(two):
    p = np.array([[1.0], [0.0]])
    res = solve_hat_a(two, p)
    # stationarity: a1 + 2 + (a1 - a2)/2 = 0, a2 + (a2 - a1)/2 = 0
    A = np.array([[1.5, -0.5], [-0.5, 1.5]])
    assert np.allclose(res.values.ravel(), np.linalg.solve(A, [-2.0, 0.0]))
    assert np.allclose(res.values.ravel(), [-1.5, -0.5])
    # dense-grid maximization of the concave objective
    g = np.linspace(-3, 1, 801)
    A1, A2 = np.meshgrid(g, g, indexing="ij")
    obj = full_objective(two, p, np.stack([A1, A2], -1)[..., None])
    k = np.unravel_index(np.argmax(obj), obj.shape)
    assert abs(g[k[0]] + 1.5) <= 0.005 and abs(g[k[1]] + 0.5) <= 0.005
    assert hamiltonian_full(two, p) == pytest.approx(obj.max(), abs=1e-4)
    assert hamiltonian_full(two, p) == pytest.approx(1.5 - 2.5 / 4 - 0.125, abs=1e-12)


def test_hat_a_residual_contract(generic3, rng):
    p = rng.normal(size=(50, 3, 2))
    cfg = FixedPointConfig(tol=1e-10)
    a = solve_hat_a(generic3, p, cfg).values
    N = 3
    assert np.max(np.abs(a + N * p + N * grad_fN(generic3, a))) <= N * cfg.tol * 1.0001
    # cross-check against a generic optimizer
    res = minimize(lambda x: -full_objective(generic3, p[0], x.reshape(3, 2)), -N * p[0].ravel(), method="BFGS",
                   options={"gtol": 1e-12})
    assert np.allclose(a[0].ravel(), res.x, atol=1e-5)


def test_interaction_free_is_explicit(free4):
    p = np.array([[2.0], [0.0], [0.0], [0.0]])
    assert np.array_equal(solve_hat_a(free4, p).values, -4 * p)
    assert hamiltonian_full(free4, p) == pytest.approx(8.0)
    assert np.allclose(envelope_grad_H(free4, p).ravel(), [8, 0, 0, 0])
    assert hamiltonian_full(free4, np.zeros((4, 1))) == 0.0


def test_zero_covector_gives_zero_control(generic3):
    spec = build_instance(3, 2, pairwise="pseudo_huber_pairwise(1.0, 0.5)")
    assert np.allclose(solve_hat_a(spec, np.zeros((3, 2))).values, 0.0)
    assert hamiltonian_full(spec, np.zeros((3, 2))) == pytest.approx(0.0)


def test_nonconvergence_carries_residual(generic3):
    with pytest.raises(NonConvergenceError) as info:
        solve_hat_a(generic3, np.ones((3, 2)), FixedPointConfig(max_iters=2))
    assert info.value.residual > 0


def test_envelope_against_differences(lq4, rng):
    for _ in range(5):
        p = rng.normal(size=(4, 1))
        g = envelope_grad_H(lq4, p, FixedPointConfig(tol=1e-13))
        fd = np.array([(hamiltonian_full(lq4, p + e) - hamiltonian_full(lq4, p - e)) / 2e-6
                       for e in 1e-6 * np.eye(4)[:, :, None]])
        assert np.allclose(g.ravel(), fd, rtol=1e-6)


def test_project_to_ball():
    assert np.allclose(project_to_ball(np.array([3.0, 4.0]), 10), [3, 4])
    assert np.allclose(project_to_ball(np.array([3.0, 4.0]), 5), [3, 4])
    assert np.allclose(project_to_ball(np.array([6.0, 8.0]), 5), [3, 4])
    with pytest.raises(ValueError):
        project_to_ball(np.ones(2), -1)


def test_check_a_interaction_free(free4, rng):
    q = rng.normal(size=(30, 4, 1))
    assert np.array_equal(solve_check_a(free4, q).values, -4 * q)
    assert hamiltonian_dist(free4, q) == pytest.approx(2.0 * np.sum(np.mean(q**2, axis=0)))


@pytest.mark.parametrize("name", ["lq4", "generic3"])
def test_single_site_equals_pointwise(name, request, rng):
    spec = request.getfixturevalue(name)
    q = rng.normal(size=(1, spec.n_agents, spec.dim)) * 0.3
    assert np.allclose(solve_check_a(spec, q).values[0], solve_hat_a(spec, q[0]).values, atol=1e-9)
    assert hamiltonian_dist(spec, q) == pytest.approx(float(hamiltonian_full(spec, q[0])), abs=1e-9)


def test_check_a_fixed_point_relation(generic3, rng):
    """Residual of the defining relation, with the averages recomputed by brute force."""
    q = rng.normal(size=(12, 3, 2)) * 0.2
    a = solve_check_a(generic3, q, cfg=FixedPointConfig(tol=1e-12)).values
    N, M = 3, 12
    for i in range(N):
        for k in range(M):
            others = [j for j in range(N) if j != i]
            acc = np.zeros(2)
            # exact product average for the pairwise part
            for j in others:
                for l in range(M):
                    b = np.zeros((N, 2))
                    b[i], b[j] = a[k, i], a[l, j]
                    acc += (2 / N**2) * generic3.h_table[i][j].gradient(a[k, i] - a[l, j])
            acc /= M
            # row-sampled average for the aggregate part
            for l in range(M):
                v = (a[k, i] + a[l, others].sum(axis=0)) / N
                acc += generic3.f0.gradient(v) / (N * M)
            assert np.allclose(a[k, i], -N * q[k, i] - N * acc, atol=1e-9)


def test_symmetric_agents_share_field(lq4, rng):
    sites = rng.normal(size=(40, 1, 1)) * 0.2
    q = np.repeat(sites, 4, axis=1)
    a = solve_check_a(lq4, q).values
    assert np.allclose(a, a[:, :1, :], atol=1e-12)


def test_extension_reproduces_sites(generic3, lq4, rng):
    for spec in (generic3, lq4):
        q = rng.normal(size=(25, spec.n_agents, spec.dim)) * 0.2
        a = solve_check_a(spec, q, cfg=FixedPointConfig(tol=1e-12)).values
        assert np.allclose(extend_check_a(spec, q, a, FixedPointConfig(tol=1e-12)), a, atol=1e-8)


def test_misaligned_sites_rejected(lq4):
    with pytest.raises(ValueError):
        solve_check_a(lq4, np.zeros((5, 4, 1)), np.zeros((6, 4, 1)))
