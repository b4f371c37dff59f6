"""Backward extremals of the blow-up example: which terminal points survive to t = 0.

With H = p - p^2 x^2 / 2 and psi = 2 exp(z + 1), arcs started from
moderately negative or positive z blow up in finite backward time.  The
script prints the escape time for a fan of terminal points, then shows the
closed-form arc from z = -1 against the integrator.

    python3 demos/escape_table.py
"""

import numpy as np

from pmpflow.catalog import make_problem
from pmpflow.flow import FlowOptions, hamiltonian_drift, integrate_backward

problem = make_problem("example21")
opts = FlowOptions(rtol=1e-11, atol=1e-14)

print(f"{'z':>6} {'status':>9} {'tau':>8} {'x at start':>12}")
for z in np.arange(-4.0, 1.01, 0.5):
    arc = integrate_backward(problem, [z], opts=opts)
    tau = "" if arc.tau is None else f"{arc.tau:.4f}"
    print(f"{z:6.2f} {arc.status:>9} {tau:>8} {arc.x_start[0]:12.5g}")

# x = 1 - t and p = 2 / (1 - t)^2 solve the system from z = -1
arc = integrate_backward(problem, [-1.0], opts=opts)
s = arc.samples
keep = s.t > 1.05
print("\nz = -1 against the closed form")
print("  max |x - (1 - t)|      ", np.max(np.abs(s.x[keep, 0] - (1 - s.t[keep]))))
print("  max |p - 2/(1 - t)^2|  ", np.max(np.abs(s.p[keep, 0] - 2 / (1 - s.t[keep]) ** 2)))
print("  Hamiltonian drift      ", hamiltonian_drift(arc))
