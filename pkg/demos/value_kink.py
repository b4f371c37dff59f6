"""Conjugate points and the kink of the value function for psi = cos.

For the single integrator on [0, 2] with psi(z) = cos z the extremal map
is y = z - 2 sin z.  It folds at cos z = 1/2, and the point y = 0 is
reached by two optimal extremals with equal cost, so V has a corner there.

    python3 demos/value_kink.py
"""

import numpy as np

from pmpflow.catalog import make_problem
from pmpflow.conjugate import sweep_locus
from pmpflow.optimality import build_reach_sweep, pair_residual, reach, value_function

problem = make_problem("single_integrator_cos")

locus = sweep_locus(problem, [[-2.0, 2.0]], 201)
print("conjugate candidates")
for c in locus.candidates:
    print(f"  z = {c.z[0]:+.9f}  (pi/3 = {np.pi / 3:.9f})  y = {c.y[0]:+.6f}  residual = {c.omega_residual:+.6f}")

sweep = build_reach_sweep(problem, [[-4.0, 4.0]], 161)
sol = reach(problem, [0.0], sweep)
print("\nextremals reaching y = 0")
for z, W in zip(sol.roots[:, 0], sol.costs):
    print(f"  z = {z:+.9f}  W = {W:.9f}")
print(f"  multiplicity of the minimum: {sol.multiplicity}")

z1 = sol.minimizers[0]
z2 = sol.minimizers[1]
pr = pair_residual(problem, z1, z2)
print(f"  pair map residual {np.abs(pr.phi).max():.2e}, Jacobian rank {pr.rank}")

ys = np.linspace(-1.0, 1.0, 21)
table = value_function(problem, ys, sweep)
print("\n   y        V       one-sided slopes")
for i, (y, V) in enumerate(zip(table.y[:, 0], table.values)):
    left = "" if i == 0 else f"{(V - table.values[i - 1]) / 0.1:+.4f}"
    mark = "  <- two minimizers" if table.non_differentiable[i] else ""
    print(f"{y:+.2f}  {V:.6f}  {left}{mark}")
