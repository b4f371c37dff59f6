"""Breaking a degenerate terminal cost with a small polynomial bump.

For psi = a z^2 / 2 with a = -1/T every terminal point is conjugate and
the second-order test is satisfied identically.  Adding a small random
bump makes the locus generic; the transversality matrix then has full
rank at every remaining candidate.

    python3 demos/generic_bumps.py
"""

import numpy as np

from pmpflow.catalog import make_problem
from pmpflow.conjugate import sweep_locus
from pmpflow.perturbation import perturb_until_generic, transversality_rank

problem = make_problem("single_integrator_quad", {"a": -0.5, "T": 2.0})

base = sweep_locus(problem, [[-2.0, 2.0]], 41)
print(f"unperturbed: {len(base.candidates)} candidates, "
      f"{sum(c.member for c in base.candidates)} degenerate")

res = perturb_until_generic(problem, [[-2.0, 2.0]], 41, scale=0.05, seed=0)
print(f"generic after {res.draws} draw(s), |theta| = {np.linalg.norm(res.theta):.4f}, "
      f"C4 bound {res.c4_norm:.3g}")
print(f"perturbed locus: {len(res.sweep.candidates)} candidates")
for c in res.sweep.candidates[:5]:
    rep = transversality_rank(problem, c.z, c.v, res.cost)
    print(f"  z = {c.z[0]:+.6f}  residual = {c.omega_residual:+.3e}  rank = {rep.rank}")
