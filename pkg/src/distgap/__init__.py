"""
Full-information versus distributed control of N agents coupled through
their controls.

Modules
-------
model        problem instances, catalog and assumption audit
hamiltonian  interaction cost, fixed-point optimizers and Hamiltonians
dynamics     Euler-Maruyama simulation and the McKean-Vlasov particle flow
value        Monte Carlo, Riccati and grid values; distributed upper bounds
bounds       theorem constants and error estimators
experiments  gap scans, property suite and report emission
"""

__version__ = "0.1.0"

from .model import (ConfigurationError, ProblemSpec, audit_assumptions, build_instance,
                    poincare_constant)
from .hamiltonian import (FixedPointConfig, NonConvergenceError, eval_fN, grad_fN,
                          hamiltonian_dist, hamiltonian_full, solve_check_a, solve_hat_a)

__all__ = ["ConfigurationError", "ProblemSpec", "audit_assumptions", "build_instance", "poincare_constant",
           "FixedPointConfig", "NonConvergenceError", "eval_fN", "grad_fN", "hamiltonian_dist", "hamiltonian_full",
           "solve_check_a", "solve_hat_a"]
