"""
Three ways to compute one value
===============================

With no interaction and ``g(x) = |x|^2 / 2N`` the value at the origin is
``ln(2)/2`` for every ``N``.  We recover it from the matrix Riccati equation,
from the explicit finite-difference HJB solver on a 2-D grid, and by Monte
Carlo under the Riccati feedback.  Then we switch the interaction on and
check that the grid still tracks the Riccati value.
"""

import math

import numpy as np

from distgap.dynamics import IntegratorConfig
from distgap.model import build_instance
from distgap.value import grid_hjb_full, mc_cost, riccati_full

spec = build_instance(2, 1, pairwise="quadratic_pairwise(0.0)", terminal="quadratic_terminal(1.0)",
                      init="dirac_init(0.0)")
origin = np.zeros((2, 1))
ric = riccati_full(spec)
grid = grid_hjb_full(spec, h=0.1)
mc = mc_cost(spec, ric.feedback_policy(), IntegratorConfig(200, seed=3), 100_000)
print(f"ln(2)/2      {math.log(2) / 2:.6f}")
print(f"Riccati      {float(ric.value(0.0, origin)):.6f}")
print(f"grid h=0.1   {float(grid.value(origin)):.6f}")
print(f"Monte Carlo  {mc.value:.6f} +- {mc.stderr:.1e}")

# %% with interaction the value is no longer available in closed form
coupled = build_instance(2, 1, pairwise="quadratic_pairwise(0.5)", terminal="quadratic_terminal(1.0)",
                         init="dirac_init(0.0)")
ric = riccati_full(coupled)
grid = grid_hjb_full(coupled, h=0.1)
pts = np.array([[[0.0], [0.0]], [[1.0], [-1.0]], [[0.5], [0.5]]])
for x, vr, vg in zip(pts, ric.value(0.0, pts), grid.value(pts)):
    print(f"x = {x.ravel()}  Riccati {vr:.6f}  grid {vg:.6f}  rel {abs(vg / vr - 1):.1e}")
