"""
A-priori bounds on globally optimal controls, trajectories and adjoints.

For initial points with ``|y| <= r`` a globally optimal triple satisfies

    ess-sup |u*| <= alpha(r),   sup |x*| <= beta(r),   sup |p*| <= gamma(r).

The constructions follow the energy/Gronwall argument:

* ``beta1(r)`` bounds ``int |u*|^2`` by comparing with the zero control;
* ``beta(r) = (r+1) exp{c1/2 [beta1 + (m+2) T]}``;
* ``beta2(r)`` is the Lipschitz constant of the trajectory with respect to
  removing the control on a set, ``|x* - x_lam| <= beta2 int_I |u*|``;
* ``alpha = max{alpha1 / c2, c2 + max_{|x|<=beta} |L(x, 0)|}``;
* ``gamma`` is the linear-ODE bound on the adjoint equation.

Suprema are estimated on a deterministic Halton cloud and inflated by
``SAFETY``.  They are assertions, not certificates.  Exponentials that
overflow are reported as ``inf`` and flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .errors import BoundViolated
from .problem import ProblemSpec, TerminalCost

__all__ = ["SAFETY", "BoundReport", "BoundCheck", "ball_sup", "compute_bounds", "bound_ladder", "verify_bounds"]

SAFETY = 1.10
POINTS_PER_DIM = 4096


def _unit_ball_cloud(d: int, per_dim: int = POINTS_PER_DIM) -> np.ndarray:
    """Halton points in ``[-1, 1]^d``; points outside the ball are pulled onto the sphere.

    The origin and the signed coordinate vectors are always included.
    """
    pts = _project(2.0 * qmc.Halton(d, scramble=False).random(per_dim * d + 1)[1:] - 1.0)
    eye = np.eye(d)
    return np.vstack([np.zeros((1, d)), eye, -eye, pts])


def ball_sup(g, radius: float, d: int, per_dim: int = POINTS_PER_DIM) -> float:
    """Inflated sample estimate of ``sup_{|x| <= radius} g(x)``.

    ``g`` maps a point to a scalar.  Returns ``inf`` for an infinite radius.
    """
    if not np.isfinite(radius):
        return np.inf
    return _inflate(max(g(q) for q in radius * _unit_ball_cloud(d, per_dim)))


def _inflate(s) -> float:
    s = float(s)
    return s * SAFETY if s > 0 else s / SAFETY


def _project(pts: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(pts, axis=1)
    out = r > 1.0
    pts[out] /= r[out, None]
    return pts


def _product_cloud(n: int, m: int, rx: float, ru: float, per_dim: int = POINTS_PER_DIM):
    """Halton pairs ``(x, u)`` covering ``|x| <= rx`` times ``|u| <= ru``, corners included."""
    d = n + m
    pts = 2.0 * qmc.Halton(d, scramble=False).random(per_dim * d + 1)[1:] - 1.0
    xs = rx * _project(pts[:, :n].copy())
    us = ru * _project(pts[:, n:].copy())
    pairs = list(zip(xs, us))
    for x in rx * _unit_ball_cloud(n, 0):
        for u in ru * _unit_ball_cloud(m, 0):
            pairs.append((x, u))
    return pairs


def _exp(x: float) -> float:
    with np.errstate(over="ignore"):
        return float(np.exp(x)) if x < 709.0 else np.inf


def _matnorm(a) -> float:
    a = np.atleast_2d(a)
    return float(np.linalg.norm(a, 2))


@dataclass(frozen=True)
class BoundReport:
    """Bound functions at radius ``r`` with the intermediate constants.

    ``overflow`` is set when some factor is infinite; ``notes`` documents
    the assembled majorants.
    """

    r: float
    beta1: float
    beta: float
    beta2: float
    alpha1: float
    alpha: float
    gamma: float
    sups: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)
    overflow: bool = False
    notes: tuple = ()

    def as_dict(self) -> dict:
        return {
            "r": self.r, "beta1": self.beta1, "beta": self.beta, "beta2": self.beta2,
            "alpha1": self.alpha1, "alpha": self.alpha, "gamma": self.gamma,
            "sups": dict(self.sups), "samples": dict(self.samples), "overflow": self.overflow,
            "safety_factor": SAFETY, "notes": list(self.notes),
        }


_NOTES = (
    "beta1 adds max(0, -inf psi)/c2 when psi can be negative",
    "beta2 = c1 sqrt(m) (beta+1) exp(G (T + sqrt(m T beta1))), G = max_i sup_{|x|<=beta} |Df_i|",
    "alpha1 = ((T + beta1) sup_{s<=beta} l(s) + sup_{|x|<=beta} |grad psi|) beta2 + 1; "
    "the +1 majorizes int_I [L(x,0) + c2] by int_I |u| for lambda above the threshold",
    "gamma = (G_psi + T G_L) exp(T G_f) over |x|<=beta, |u|<=alpha",
)


def compute_bounds(problem: ProblemSpec, r: float, psi: Optional[TerminalCost] = None,
                   per_dim: int = POINTS_PER_DIM) -> BoundReport:
    if r <= 0:
        raise ValueError("radius must be positive")
    psi = psi or problem.terminal_cost
    n, m, T, c1, c2 = problem.n, problem.m, problem.T, problem.c1, problem.c2
    L = problem.running_cost
    dyn = problem.dynamics
    u0 = np.zeros(m)

    R0 = (r + 1.0) * np.exp(c1 * T)
    sup_L0 = max(ball_sup(lambda x: L.value(x, u0), R0, n, per_dim), 0.0)
    sup_psi = ball_sup(lambda x: abs(psi.value(x)), R0, n, per_dim)
    shift = max(0.0, -psi.lower_bound) if np.isfinite(psi.lower_bound) else np.inf
    beta1 = (T * sup_L0 + sup_psi + shift) / c2 + T
    beta = (r + 1.0) * _exp(0.5 * c1 * (beta1 + (m + 2) * T))

    G = max(ball_sup(lambda x: max(_matnorm(f.jacobian(x)) for f in dyn.fields), beta, n, per_dim), 0.0)
    beta2 = c1 * np.sqrt(m) * (beta + 1.0) * _exp(G * (T + np.sqrt(m * T * beta1)))
    if np.isfinite(beta):
        s = np.linspace(0.0, beta, per_dim)
        sup_ell = SAFETY * float(max(np.max([L.modulus(si) for si in s]), 0.0))
    else:
        sup_ell = np.inf
    G_psi = ball_sup(lambda x: float(np.linalg.norm(psi.gradient(x))), beta, n, per_dim)
    with np.errstate(invalid="ignore", over="ignore"):
        alpha1 = ((T + beta1) * sup_ell + G_psi) * beta2 + 1.0
        sup_absL0 = max(ball_sup(lambda x: abs(L.value(x, u0)), beta, n, per_dim), 0.0)
        alpha = max(alpha1 / c2, c2 + sup_absL0)

    if np.isfinite(alpha) and np.isfinite(beta):
        pairs = _product_cloud(n, m, beta, alpha, per_dim)
        G_f = max(_inflate(max(_matnorm(dyn.jacobian(x, u)) for x, u in pairs)), 0.0)
        G_L = max(_inflate(max(float(np.linalg.norm(L.grad_x(x, u))) for x, u in pairs)), 0.0)
        with np.errstate(invalid="ignore", over="ignore"):
            gamma = (G_psi + T * G_L) * _exp(T * G_f)
    else:
        G_f = G_L = np.inf
        gamma = np.inf
    if not np.isfinite(G_psi):
        gamma = np.inf
    vals = [beta1, beta, beta2, alpha1, alpha, gamma]
    overflow = not all(np.isfinite(v) for v in vals)
    sups = {"L0": sup_L0, "psi": sup_psi, "Df": G, "ell": sup_ell, "grad_psi": G_psi,
            "absL0": sup_absL0, "f_x": G_f, "L_x": G_L, "R0": R0}
    samples = {"per_dim": per_dim, "x_ball": per_dim * n + 2 * n + 1, "xu_ball": per_dim * (n + m) + 2 * (n + m) + 1}
    return BoundReport(float(r), float(beta1), float(beta), float(beta2), float(alpha1), float(alpha), float(gamma),
                       sups, samples, overflow, _NOTES)


_LADDER_KEYS = ("beta1", "beta", "beta2", "alpha1", "alpha", "gamma")


def bound_ladder(problem: ProblemSpec, radii: Sequence[float], psi: Optional[TerminalCost] = None,
                 per_dim: int = POINTS_PER_DIM) -> List[BoundReport]:
    """Bounds at increasing radii, made nondecreasing by a running maximum.

    Each radius uses its own sample cloud, so raw estimates can dip by the
    sampling error.  A bound valid on a smaller ball also holds on a
    larger one, which makes the running maximum a valid bound as well.
    """
    radii = sorted(float(r) for r in radii)
    out: List[BoundReport] = []
    for r in radii:
        rep = compute_bounds(problem, r, psi, per_dim)
        if out:
            prev = out[-1]
            rep = replace(rep, **{k: max(getattr(rep, k), getattr(prev, k)) for k in _LADDER_KEYS})
        out.append(rep)
    return out


@dataclass(frozen=True)
class BoundCheck:
    passed: bool
    failures: List[str]
    u_sup: float
    x_sup: float
    p_sup: float
    energy: float

    def raise_if_failed(self):
        if not self.passed:
            raise BoundViolated(self)


def verify_bounds(record, report: BoundReport) -> BoundCheck:
    """Check an extremal against the bounds at ``report.r``.

    ``record`` is an :class:`~pmpflow.optimality.ExtremalRecord` carrying
    its arc.  Euclidean norms are maximized over the arc samples and
    ``int |u|^2`` is compared with ``beta1``.  An escaped arc fails on
    ``int |u|^2 = inf``.
    """
    arc = record.arc
    if arc is None:
        raise ValueError("record carries no arc")
    s = arc.samples
    u_sup = float(np.max(np.linalg.norm(s.u, axis=1))) if s.u.size else 0.0
    x_sup = float(np.max(np.linalg.norm(s.x, axis=1)))
    p_sup = float(np.max(np.linalg.norm(s.p, axis=1)))
    if arc.complete:
        energy = _energy(arc)
    else:
        energy = np.inf
    failures = []
    if not arc.complete:
        failures.append(f"arc escaped at t={arc.tau:.6g}")
    if not u_sup <= report.alpha:
        failures.append(f"|u|={u_sup:.6g} > alpha={report.alpha:.6g}")
    if not x_sup <= report.beta:
        failures.append(f"|x|={x_sup:.6g} > beta={report.beta:.6g}")
    if not p_sup <= report.gamma:
        failures.append(f"|p|={p_sup:.6g} > gamma={report.gamma:.6g}")
    if not energy <= report.beta1:
        failures.append(f"int|u|^2={energy:.6g} > beta1={report.beta1:.6g}")
    return BoundCheck(not failures, failures, u_sup, x_sup, p_sup, energy)


def _energy(arc) -> float:
    """``int |u*|^2 dt`` by the same quadrature as the running cost."""
    from .flow import _ustar

    ts = np.sort(arc.step_times)
    a, b = ts[:-1], ts[1:]
    nodes, weights = np.polynomial.legendre.leggauss(6)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    tt = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    ww = (half[:, None] * weights[None, :]).ravel()
    x, p = arc.state(tt)
    vals = np.array([float(np.sum(_ustar(arc.problem, xi, pi) ** 2)) for xi, pi in zip(x.T, p.T)])
    return float(ww @ vals)
