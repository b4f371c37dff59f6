"""
Polynomial bump perturbations of the terminal cost and the transversality check.

A bump centred at ``zbar`` adds ``eta(z - zbar) phi(theta, z - zbar)`` to
``psi`` where

    phi(theta, y) = sum_ij Theta_ij y_i y_j + sum_k c_k y_k^3

and ``eta`` is a smooth radial cutoff equal to one on ``|y| <= r_in`` and
zero on ``|y| >= r_out``.  ``theta`` stores ``Theta`` row-major followed by
``c``, so one bump has ``n^2 + n`` parameters.

Near the centre the bump shifts the Hessian by ``Theta + Theta^T`` and the
third derivative by ``6 diag(c)``, which is what makes the map
``theta -> Phi(zbar, v)`` submersive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._parallel import parallel_map
from .conjugate import OMEGA_TOL, RANK_TOL, LocusSweep, sweep_locus
from .errors import BudgetExhausted, ConfigError, DimensionMismatch, EscapedArc, EscapedNeighborhood
from .flow import FlowOptions, integrate_variational, second_variation_along
from .problem import ProblemSpec, TerminalCost

__all__ = [
    "phi_poly",
    "eta",
    "BumpPerturbation",
    "PerturbedTerminalCost",
    "TransversalityReport",
    "GenericResult",
    "transversality_rank",
    "perturb_until_generic",
    "bump_centers",
]

ORDER = 4
TIGHT = FlowOptions(rtol=1e-12, atol=1e-14)


# --------------------------------------------------------------------------
# truncated univariate Taylor jets, enough for the cutoff's derivatives

class _Jet:
    """Taylor coefficients ``c_k = f^(k)(s) / k!`` for ``k <= ORDER``."""

    __slots__ = ("c",)

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    @classmethod
    def variable(cls, value, slope=1.0):
        c = np.zeros(ORDER + 1)
        c[0], c[1] = value, slope
        return cls(c)

    @classmethod
    def constant(cls, value):
        c = np.zeros(ORDER + 1)
        c[0] = value
        return cls(c)

    def __add__(self, other):
        return _Jet(self.c + other.c)

    def __mul__(self, other):
        c = np.zeros(ORDER + 1)
        for i in range(ORDER + 1):
            c[i:] += self.c[i] * other.c[: ORDER + 1 - i]
        return _Jet(c)

    def compose(self, derivs):
        """``F(self)`` from the derivatives ``F^(k)(c_0)``."""
        h = _Jet(np.concatenate([[0.0], self.c[1:]]))
        out = _Jet.constant(derivs[0])
        power = _Jet.constant(1.0)
        for k in range(1, ORDER + 1):
            power = power * h
            out = out + _Jet(power.c * (derivs[k] / math.factorial(k)))
        return out

    def reciprocal(self):
        a = self.c[0]
        return self.compose([(-1) ** k * math.factorial(k) / a ** (k + 1) for k in range(ORDER + 1)])

    def exp(self):
        e = math.exp(self.c[0])
        return self.compose([e] * (ORDER + 1))

    def derivatives(self):
        return np.array([self.c[k] * math.factorial(k) for k in range(ORDER + 1)])


def _smooth_step(t: _Jet) -> _Jet:
    """``exp(-1/t)`` for ``t > 0`` and zero otherwise."""
    if t.c[0] <= 1.0 / 700.0:
        return _Jet.constant(0.0)
    return (_Jet.constant(-1.0) * t.reciprocal()).exp()


def _profile(s: float, a: float, b: float) -> np.ndarray:
    """Derivatives of ``g`` with ``eta(y) = g(|y|^2)``, orders 0..4."""
    if s <= a:
        return np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    if s >= b:
        return np.zeros(ORDER + 1)
    f1 = _smooth_step(_Jet.variable(b - s, -1.0))
    f2 = _smooth_step(_Jet.variable(s - a, 1.0))
    return (f1 * (f1 + f2).reciprocal()).derivatives()


def eta(y, r_in: float = 1.0, r_out: float = 2.0, order: int = 0):
    """Radial cutoff and its derivative tensors up to ``order`` (at most 4).

    Returns a list ``[eta, D eta, D^2 eta, ...]`` when ``order > 0`` and the
    scalar value otherwise.
    """
    if not 0 < r_in < r_out:
        raise ValueError("need 0 < r_in < r_out")
    if order > ORDER:
        raise ValueError(f"derivatives available up to order {ORDER}")
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    g = _profile(float(y @ y), r_in**2, r_out**2)
    if order == 0:
        return float(g[0])
    I = np.eye(n)
    out = [float(g[0]), 2.0 * g[1] * y]
    if order >= 2:
        out.append(4.0 * g[2] * np.outer(y, y) + 2.0 * g[1] * I)
    if order >= 3:
        yyy = np.einsum("i,j,k->ijk", y, y, y)
        sym = np.einsum("ij,k->ijk", I, y)
        sym = sym + sym.transpose(0, 2, 1) + sym.transpose(2, 1, 0)
        out.append(8.0 * g[3] * yyy + 4.0 * g[2] * sym)
    if order >= 4:
        y4 = np.einsum("i,j,k,l->ijkl", y, y, y, y)
        Iyy = np.einsum("ij,k,l->ijkl", I, y, y)
        six = sum(Iyy.transpose(p) for p in [(0, 1, 2, 3), (0, 2, 1, 3), (0, 2, 3, 1),
                                               (2, 0, 1, 3), (2, 0, 3, 1), (2, 3, 0, 1)])
        II = np.einsum("ij,kl->ijkl", I, I)
        three = II + II.transpose(0, 2, 1, 3) + II.transpose(0, 2, 3, 1)
        out.append(16.0 * g[4] * y4 + 8.0 * g[3] * six + 4.0 * g[2] * three)
    return out


# --------------------------------------------------------------------------
# polynomial part

def _split(theta, n: int) -> Tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != n * n + n:
        raise DimensionMismatch(f"theta has {theta.size} entries, expected n^2 + n = {n * n + n}")
    return theta[: n * n].reshape(n, n), theta[n * n:]


def phi_poly(theta, z, order: int = 0):
    """``phi(theta, z)`` and, for ``order > 0``, its derivative tensors up to order 3."""
    z = np.asarray(z, dtype=float).ravel()
    n = z.size
    Th, c = _split(theta, n)
    S = Th + Th.T
    val = float(z @ Th @ z + c @ z**3)
    if order == 0:
        return val
    out = [val, S @ z + 3.0 * c * z**2]
    if order >= 2:
        out.append(S + np.diag(6.0 * c * z))
    if order >= 3:
        D3 = np.zeros((n, n, n))
        D3[np.arange(n), np.arange(n), np.arange(n)] = 6.0 * c
        out.append(D3)
    return out


@dataclass(frozen=True)
class BumpPerturbation:
    center: np.ndarray
    theta: np.ndarray
    r_in: float = 1.0
    r_out: float = 2.0

    @property
    def n(self) -> int:
        return int(np.asarray(self.center).size)

    def jets(self, z, order: int = 3):
        """Value and derivative tensors of ``eta phi`` at ``z`` by the product rule."""
        y = np.asarray(z, dtype=float).ravel() - np.asarray(self.center, dtype=float)
        if y @ y >= self.r_out**2:
            n = y.size
            return [0.0] + [np.zeros((n,) * k) for k in range(1, order + 1)]
        e = eta(y, self.r_in, self.r_out, order=max(order, 1))
        f = phi_poly(self.theta, y, order=max(order, 1))
        out = [e[0] * f[0]]
        if order >= 1:
            out.append(e[0] * f[1] + f[0] * e[1])
        if order >= 2:
            out.append(e[0] * f[2] + f[0] * e[2] + np.outer(e[1], f[1]) + np.outer(f[1], e[1]))
        if order >= 3:
            t = np.einsum("ij,k->ijk", e[2], f[1]) + np.einsum("ij,k->ijk", f[2], e[1])
            t = t + t.transpose(0, 2, 1) + t.transpose(2, 1, 0)
            out.append(e[3] * f[0] + e[0] * f[3] + t)
        return out

    def phi_sup_per_theta(self) -> List[float]:
        """Bounds on ``|D^k phi|`` over the support, per unit ``|theta|``, ``k = 0..4``."""
        r = self.r_out
        return [r**2 + r**3, 2 * r + 3 * r**2, 2 + 6 * r, 6.0, 0.0]


@dataclass(frozen=True)
class PerturbedTerminalCost:
    """``psi + sum_l eta(z - zbar_l) phi(theta_l, z - zbar_l)``.

    Behaves as a :class:`~pmpflow.problem.TerminalCost` with an exact
    directional third derivative.  ``theta`` concatenates the per-bump
    parameter vectors in the order of ``centers``.
    """

    base: TerminalCost
    centers: np.ndarray
    theta: np.ndarray
    r_in: float = 1.0
    r_out: float = 2.0
    label: str = "perturbed"

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", C)
        n = C.shape[1]
        th = np.asarray(self.theta, dtype=float).ravel()
        if th.size != C.shape[0] * (n * n + n):
            raise DimensionMismatch(f"theta must have {C.shape[0] * (n * n + n)} entries")
        object.__setattr__(self, "theta", th)

    @property
    def n(self) -> int:
        return self.centers.shape[1]

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def bumps(self) -> List[BumpPerturbation]:
        k = self.n * self.n + self.n
        return [BumpPerturbation(c, self.theta[i * k:(i + 1) * k], self.r_in, self.r_out)
                for i, c in enumerate(self.centers)]

    def with_theta(self, theta) -> "PerturbedTerminalCost":
        return PerturbedTerminalCost(self.base, self.centers, theta, self.r_in, self.r_out, self.label)

    def _sum(self, z, order):
        acc = None
        for b in self.bumps:
            j = b.jets(z, order)
            acc = j if acc is None else [a + x for a, x in zip(acc, j)]
        return acc

    def value(self, z) -> float:
        return float(self.base.value(z)) + float(self._sum(z, 0)[0])

    def gradient(self, z) -> np.ndarray:
        return np.asarray(self.base.gradient(z), dtype=float) + self._sum(z, 1)[1]

    def hessian(self, z) -> np.ndarray:
        return np.asarray(self.base.hessian(z), dtype=float) + self._sum(z, 2)[2]

    def third(self, z, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return self.base.third_directional(z, v) + np.einsum("ijk,i,j->k", self._sum(z, 3)[3], v, v)

    third_directional = third
    third_is_exact = True

    @property
    def lower_bound(self) -> float:
        return self.base.lower_bound - self.sup_norm_bound()[0]

    def sup_norm_bound(self) -> List[float]:
        """Upper bounds on ``sup |D^k (psi^theta - psi)|`` for ``k = 0..4``.

        Cutoff derivative norms are taken from a radial scan (they are
        rotation invariant); ``|D^k (eta phi)|`` follows from the Leibniz
        rule.  Overlapping bumps are added.
        """
        e = _eta_sups(self.r_in, self.r_out, self.n)
        total = np.zeros(ORDER + 1)
        for b in self.bumps:
            f = np.array(b.phi_sup_per_theta()) * np.linalg.norm(b.theta)
            for k in range(ORDER + 1):
                total[k] += sum(math.comb(k, j) * e[j] * f[k - j] for j in range(k + 1))
        return list(total)

    def c4_norm(self) -> float:
        return float(max(self.sup_norm_bound()))


_ETA_CACHE: dict = {}


def _eta_sups(r_in, r_out, n) -> np.ndarray:
    key = (r_in, r_out, n)
    if key not in _ETA_CACHE:
        sups = np.zeros(ORDER + 1)
        for r in np.linspace(r_in, r_out, 2001):
            y = np.zeros(n)
            y[0] = r
            for k, t in enumerate(eta(y, r_in, r_out, order=ORDER)):
                sups[k] = max(sups[k], float(np.linalg.norm(np.ravel(t))))
        sups[0] = 1.0
        _ETA_CACHE[key] = 1.1 * sups
    return _ETA_CACHE[key]


def bump_centers(z_box, r_in: float = 1.0) -> np.ndarray:
    """Tensor grid of centres whose inner balls cover ``z_box``."""
    box = np.atleast_2d(np.asarray(z_box, dtype=float))
    n = box.shape[0]
    spacing = 2.0 * r_in / np.sqrt(n)
    axes = []
    for lo, hi in box:
        k = max(1, int(np.ceil((hi - lo) / spacing)))
        axes.append(np.linspace(lo, hi, k + 1) if hi > lo else np.array([lo]))
    return np.array(np.meshgrid(*axes, indexing="ij")).reshape(n, -1).T


# --------------------------------------------------------------------------
# transversality

def _phi_map(problem, z, v, psi, opts):
    """``(X(0) v, (Y(0) v)^T Xi(0))`` with the second variation from the ODE."""
    try:
        _, bundle = integrate_variational(problem, z, psi, opts)
    except EscapedArc as exc:
        raise EscapedNeighborhood(f"arc escaped at tau={exc.tau:.4g}") from None
    sv = second_variation_along(problem, z, v, psi, opts, method="ode")
    return np.append(bundle.X0 @ v, (bundle.Y0 @ v) @ sv.xi0)


@dataclass(frozen=True)
class TransversalityReport:
    rank: int
    singular_values: np.ndarray
    matrix: np.ndarray
    z: np.ndarray
    v: np.ndarray
    h: float

    def as_dict(self) -> dict:
        return {"rank": self.rank, "singular_values": list(self.singular_values), "z": list(self.z),
                "v": list(self.v), "h": self.h, "shape": list(self.matrix.shape)}


def transversality_rank(problem: ProblemSpec, z, v, family: PerturbedTerminalCost, theta=None,
                        h: float = 1e-5, columns: Optional[Sequence[int]] = None,
                        opts: FlowOptions = TIGHT, rank_rtol: float = 1e-6,
                        workers: int = 1) -> TransversalityReport:
    """Numeric rank of ``D_theta Phi(z, v)`` by central differences in ``theta``.

    ``columns`` restricts the derivative to a subset of the parameters.
    The step is ``h * max(1, |theta|)``.
    """
    z = np.asarray(z, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    v = v / np.linalg.norm(v)
    th0 = family.theta if theta is None else np.asarray(theta, dtype=float).ravel()
    cols = list(range(th0.size)) if columns is None else list(columns)
    step = h * max(1.0, float(np.linalg.norm(th0)))

    def column(j):
        e = np.zeros(th0.size)
        e[j] = step
        plus = _phi_map(problem, z, v, family.with_theta(th0 + e), opts)
        minus = _phi_map(problem, z, v, family.with_theta(th0 - e), opts)
        return (plus - minus) / (2 * step)

    M = np.array(parallel_map(column, cols, workers)).T.reshape(problem.n + 1, len(cols))
    s = np.linalg.svd(M, compute_uv=False)
    rank = int(np.sum(s > rank_rtol * s[0])) if s.size and s[0] > 0 else 0
    return TransversalityReport(rank, s, M, z, v, h)


@dataclass(frozen=True)
class GenericResult:
    cost: PerturbedTerminalCost
    draws: int
    theta: np.ndarray
    seed: int
    sweep: LocusSweep = field(repr=False)
    c4_norm: float = 0.0


def perturb_until_generic(problem: ProblemSpec, z_box, grid_per_axis: int = 101, psi: Optional[TerminalCost] = None,
                          max_draws: int = 10, scale: float = 0.05, seed: int = 0, r_in: float = 1.0,
                          r_out: float = 2.0, c4_budget: Optional[float] = None, opts: FlowOptions = FlowOptions(),
                          rank_tol: float = RANK_TOL, omega_tol: float = OMEGA_TOL,
                          workers: int = 1) -> GenericResult:
    """Draw bump parameters until the sampled locus has no degenerate candidate.

    Draw 0 is the unperturbed cost.  Later draws take ``theta`` uniformly in
    the ball of radius ``scale`` from ``numpy.random.default_rng(seed)``.
    Raises :class:`BudgetExhausted` after ``max_draws`` draws and
    :class:`ConfigError` when ``scale`` could push the perturbation past
    ``c4_budget`` (no check when it is ``None``).  The cutoff's fourth
    derivative alone is of order ``1e5``, so meaningful budgets are large.
    """
    psi = psi or problem.terminal_cost
    centers = bump_centers(z_box, r_in)
    k = centers.shape[0] * (problem.n ** 2 + problem.n)
    family = PerturbedTerminalCost(psi, centers, np.zeros(k), r_in, r_out)
    unit = family.with_theta(np.full(k, 1.0 / np.sqrt(k)))
    if c4_budget is not None and scale * unit.c4_norm() > c4_budget:
        raise ConfigError(f"scale {scale} exceeds the C4 budget {c4_budget} (bound {scale * unit.c4_norm():.3g})")
    rng = np.random.default_rng(seed)
    nearest = []
    for draw in range(max_draws):
        if draw == 0:
            theta = np.zeros(k)
        else:
            d = rng.normal(size=k)
            theta = scale * rng.random() ** (1.0 / k) * d / np.linalg.norm(d)
        cost = family.with_theta(theta)
        sw = sweep_locus(problem, z_box, grid_per_axis, cost, opts, rank_tol=rank_tol,
                         omega_tol=omega_tol, workers=workers)
        bad = [c for c in sw.candidates if c.member]
        if not bad:
            return GenericResult(cost, draw, theta, seed, sw, cost.c4_norm())
        worst = min(bad, key=lambda c: abs(c.omega_residual))
        nearest.append({"draw": draw, "violations": len(bad), "z": worst.z.tolist(),
                        "omega_residual": worst.omega_residual, "sigma_min": worst.sigma_min})
    raise BudgetExhausted(f"no generic perturbation in {max_draws} draws (seed {seed})",
                          {"seed": seed, "scale": scale, "draws": nearest})
