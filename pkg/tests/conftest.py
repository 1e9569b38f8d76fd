import numpy as np
import pytest

from distgap.model import RadialCost, build_instance


def quarter_square():
    """hhat(r) = r^2 / 4, given through generic handles (no kappa fast path)."""
    return RadialCost(profile=lambda r: r * r / 4, d1=lambda r: r / 2, d2=lambda r: 0.5 + 0 * r, d2_sup=0.5,
                      name="r^2/4")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def lq4():
    return build_instance(4, 1, pairwise="quadratic_pairwise(0.5)", terminal="quadratic_terminal(1.0)",
                          init="gaussian_init(0.0, 0.0625)")


@pytest.fixture
def generic3():
    """Non-quadratic pairwise cost and a nonzero aggregate cost in two dimensions."""
    return build_instance(3, 2, pairwise="pseudo_huber_pairwise(1.0, 0.5)", f0="lipschitz_f0(0.5, 1.0)",
                          terminal="huber_terminal(1.0, 1.0)", init="gaussian_init(0.0, 0.5)")


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
