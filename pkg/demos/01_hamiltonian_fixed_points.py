"""
Pointwise and distributed optimizers of the Hamiltonian
=======================================================

For a covector ``p`` (one row per agent) the full-information optimizer
``a_hat(p)`` solves ``a = -N p - N grad f(a)``.  The distributed optimizer
``a_check`` solves the same relation with ``grad_i f`` replaced by its average
over the other agents' empirical laws, so agent ``i`` only sees its own
covector.  This script solves both on a small non-quadratic instance and
prints the checks that make them trustworthy.
"""

import numpy as np

from distgap.bounds import estimate_AN, estimate_E1
from distgap.hamiltonian import (FixedPointConfig, envelope_grad_H, hamiltonian_full, solve_check_a,
                                 solve_hat_a)
from distgap.model import build_instance
from distgap.properties import random_covectors

spec = build_instance(3, 2, pairwise="pseudo_huber_pairwise(1.0, 0.5)", f0="lipschitz_f0(0.5, 1.0)",
                      terminal="huber_terminal(1.0, 1.0)", init="gaussian_init(0.0, 0.5)")
cfg = FixedPointConfig(tol=1e-13)
rng = np.random.default_rng(1)

# %% full information: one covector, one fixed point
p = rng.normal(scale=0.2, size=(3, 2))
res = solve_hat_a(spec, p, cfg)
print("a_hat(p) =\n", res.values)
print(f"Picard iterations {res.report.iterations}, residual {res.report.residual:.1e}")

# the gradient of H is -a_hat (envelope theorem); compare with central differences
h = 1e-6
fd = np.zeros_like(p)
for idx in np.ndindex(p.shape):
    e = np.zeros_like(p)
    e[idx] = h
    fd[idx] = (hamiltonian_full(spec, p + e, cfg) - hamiltonian_full(spec, p - e, cfg)) / (2 * h)
print("envelope vs finite differences:", np.abs(envelope_grad_H(spec, p, cfg) - fd).max())

# %% distributed: a covector per agent and per site
# covectors with |q^i| <= C_G/N, the range where the bounds below apply
q = random_covectors(spec, 500, rng)
a_check = solve_check_a(spec, q, cfg=cfg).values
print("largest distributed control", np.linalg.norm(a_check, axis=-1).max(),
      "bound", spec.terminal.C_G + spec.f0.lipschitz)

# the distributed Hamiltonian sits below the average of H; E1 measures by how much
e1 = estimate_E1(spec, q, fp_cfg=cfg)
an = estimate_AN(spec, q, fp_cfg=cfg)
print(f"E1 = {e1.value:.3e} +- {e1.stderr:.1e}   (<= 0 up to noise)")
print(f"AN = {an.value:.3e} +- {an.stderr:.1e}   (mean squared distance between the optimizers)")
