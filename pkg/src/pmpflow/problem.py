"""
Control-affine optimal control problems and their Hamiltonian.

A problem is described by the dynamics

    x' = f0(x) + sum_i f_i(x) u_i,

a running cost ``L(x, u)`` that is uniformly convex in ``u``, a terminal
cost ``psi`` and a horizon ``T``.  The Hamiltonian

    H(x, p) = min_w  L(x, w) + p . f(x, w)

is evaluated through the pointwise minimizer ``u*(x, p)``.  Its first
derivatives follow from the envelope identity and its second derivatives
from implicit differentiation of the stationarity condition

    L_u(x, u*) + F(x)^T p = 0,        F = [f_1 | ... | f_m].

All oracles are plain callables on 1-D NumPy arrays; nothing here holds
mutable state, so evaluations are safe to run from several workers.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, NonConvergence, SingularLuu

Array = np.ndarray

__all__ = [
    "VectorField",
    "ControlAffineDynamics",
    "RunningCost",
    "TerminalCost",
    "ProblemSpec",
    "HamiltonianEval",
    "TestBox",
    "pointwise_minimizer",
    "hamiltonian",
    "hamiltonian_gradient",
    "hamiltonian_derivatives",
    "hamiltonian_third_directional",
    "check_assumptions",
    "check_oracles",
]


@dataclass(frozen=True)
class VectorField:
    """A smooth map R^n -> R^n with first and second derivative oracles.

    ``hessian(x)`` returns an ``(n, n, n)`` array ``h`` with
    ``h[k, i, j] = d^2 f_k / dx_i dx_j``.
    """

    value: Callable[[Array], Array]
    jacobian: Callable[[Array], Array]
    hessian: Callable[[Array], Array]
    third: Optional[Callable[[Array], Array]] = None


@dataclass(frozen=True)
class ControlAffineDynamics:
    """Vector fields ``f0, f1, ..., fm`` of ``f(x, u) = f0(x) + sum f_i(x) u_i``."""

    fields: Tuple[VectorField, ...]

    def __post_init__(self):
        if len(self.fields) < 2:
            raise DimensionMismatch("need a drift f0 and at least one control field")

    @property
    def m(self) -> int:
        return len(self.fields) - 1

    def control_matrix(self, x: Array) -> Array:
        """Return the ``n x m`` matrix with columns ``f_1(x), ..., f_m(x)``."""
        return np.stack([f.value(x) for f in self.fields[1:]], axis=1)

    def evaluate(self, x: Array, u: Array) -> Array:
        return self.fields[0].value(x) + self.control_matrix(x) @ u

    def jacobian(self, x: Array, u: Array) -> Array:
        out = np.array(self.fields[0].jacobian(x), dtype=float)
        for ui, f in zip(u, self.fields[1:]):
            out = out + ui * f.jacobian(x)
        return out

    def hessian(self, x: Array, u: Array) -> Array:
        out = np.array(self.fields[0].hessian(x), dtype=float)
        for ui, f in zip(u, self.fields[1:]):
            out = out + ui * f.hessian(x)
        return out

    def control_jacobians(self, x: Array) -> Array:
        """``(m, n, n)`` stack of the Jacobians of ``f_1, ..., f_m``."""
        return np.stack([f.jacobian(x) for f in self.fields[1:]])


@dataclass(frozen=True)
class RunningCost:
    """Oracles for ``L`` and its derivatives up to second order.

    ``hess_xu`` is ``n x m``; ``modulus`` is the function ``ell`` in the
    growth bound ``|L_x(x, u)| <= ell(|x|) (1 + |u|^2)``.
    """

    value: Callable[[Array, Array], float]
    grad_x: Callable[[Array, Array], Array]
    grad_u: Callable[[Array, Array], Array]
    hess_xx: Callable[[Array, Array], Array]
    hess_xu: Callable[[Array, Array], Array]
    hess_uu: Callable[[Array, Array], Array]
    modulus: Callable[[float], float]
    has_third: bool = False


@dataclass(frozen=True)
class TerminalCost:
    """Terminal cost ``psi`` with gradient, Hessian and directional third derivative.

    ``third(z, v)`` returns the vector ``D^3 psi(z)(v, v, .)``.  When it is
    not supplied, :meth:`third_directional` falls back to a central
    difference of the Hessian.  ``lower_bound`` is a global lower bound of
    ``psi`` used by the a-priori estimates.
    """

    value: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    hessian: Callable[[Array], Array]
    third: Optional[Callable[[Array, Array], Array]] = None
    lower_bound: float = 0.0
    label: str = "psi"

    @property
    def third_is_exact(self) -> bool:
        return self.third is not None

    def third_directional(self, z: Array, v: Array, h: Optional[float] = None) -> Array:
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        if self.third is not None:
            return np.asarray(self.third(z, v), dtype=float)
        if h is None:
            h = 1e-4 * (1.0 + np.linalg.norm(z))
        d2 = (self.hessian(z + h * v) - self.hessian(z - h * v)) / (2 * h)
        return d2 @ v


@dataclass(frozen=True)
class ProblemSpec:
    """A control-affine optimal control problem on ``[0, T]``.

    Parameters
    ----------
    n, m : int
        State and control dimensions.
    T : float
        Horizon.
    dynamics : ControlAffineDynamics
    running_cost : RunningCost
    terminal_cost : TerminalCost
        Default terminal cost; flow routines accept an override.
    c1 : float
        Sublinear growth constant, ``|f_i(x)| <= c1 (|x| + 1)``.
    c2, delta_L : float
        Coercivity constant ``L >= c2 (|u|^2 - 1)`` and convexity modulus
        ``L_uu > delta_L I``.
    minimizer : callable, optional
        Closed-form ``u*(x, p)``; when absent a damped Newton solve is used.
    hamiltonian_third : callable, optional
        Exact directional third derivatives ``(x, p, dx, dp) ->
        (dH_xx, dH_px, dH_pp)``.  Otherwise second derivatives are
        differenced.
    """

    n: int
    m: int
    T: float
    dynamics: ControlAffineDynamics
    running_cost: RunningCost
    terminal_cost: TerminalCost
    c1: float = 1.0
    c2: float = 0.25
    delta_L: float = 0.5
    label: str = "custom"
    minimizer: Optional[Callable[[Array, Array], Array]] = None
    hamiltonian_third: Optional[Callable[[Array, Array, Array, Array], Tuple[Array, Array, Array]]] = None
    params: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise DimensionMismatch(f"dimensions must be positive, got n={self.n}, m={self.m}")
        if self.dynamics.m != self.m:
            raise DimensionMismatch(f"dynamics has {self.dynamics.m} control fields, expected m={self.m}")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        x = np.zeros(self.n)
        for i, f in enumerate(self.dynamics.fields):
            if np.shape(f.value(x)) != (self.n,):
                raise DimensionMismatch(f"vector field f{i} does not map R^{self.n} to R^{self.n}")

    def with_terminal_cost(self, psi: TerminalCost) -> "ProblemSpec":
        return dataclasses.replace(self, terminal_cost=psi)


@dataclass(frozen=True)
class HamiltonianEval:
    """Hamiltonian value and derivatives at one ``(x, p)``.

    ``H_px[i, j] = d^2 H / dp_i dx_j`` and ``H_xp`` is its transpose.
    """

    u_star: Array
    H: float
    H_x: Array
    H_p: Array
    H_xx: Array
    H_px: Array
    H_pp: Array

    @property
    def H_xp(self) -> Array:
        return self.H_px.T


def _as_vec(a, n: int, name: str) -> Array:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != (n,):
        raise DimensionMismatch(f"{name} must have shape ({n},), got {a.shape}")
    return a


def _newton_minimizer(problem: ProblemSpec, x: Array, p: Array, tol: float, max_iter: int = 50) -> Array:
    L = problem.running_cost
    Fp = problem.dynamics.control_matrix(x).T @ p

    def objective(w):
        return L.value(x, w) + Fp @ w

    w = np.zeros(problem.m)
    obj = objective(w)
    for _ in range(max_iter):
        g = L.grad_u(x, w) + Fp
        if np.linalg.norm(g) <= tol:
            return w
        try:
            chol = np.linalg.cholesky(L.hess_uu(x, w))
        except np.linalg.LinAlgError:
            raise SingularLuu(f"L_uu not positive definite at x={x}, u={w}") from None
        step = -np.linalg.solve(chol.T, np.linalg.solve(chol, g))
        slope = g @ step
        alpha = 1.0
        while True:
            trial = w + alpha * step
            obj_trial = objective(trial)
            if obj_trial <= obj + 1e-4 * alpha * slope or alpha < 1e-12:
                break
            alpha *= 0.5
        w, obj = trial, obj_trial
    g = L.grad_u(x, w) + Fp
    if np.linalg.norm(g) <= tol:
        return w
    raise NonConvergence(f"pointwise minimizer did not converge in {max_iter} iterations (|grad|={np.linalg.norm(g):.3e})")


def pointwise_minimizer(problem: ProblemSpec, x, p, tol: float = 1e-12, method: str = "auto") -> Array:
    """Return ``u*(x, p) = argmin_w L(x, w) + p . f(x, w)``.

    ``method="auto"`` uses the problem's closed form when it has one and a
    damped Newton iteration (start ``w = 0``, at most 50 steps) otherwise;
    ``method="newton"`` forces the iteration.  ``tol`` bounds the norm of
    the stationarity residual, relative to ``1 + |F(x)^T p|``.
    """
    x = _as_vec(x, problem.n, "x")
    p = _as_vec(p, problem.n, "p")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if method == "auto" and problem.minimizer is not None:
        return np.asarray(problem.minimizer(x, p), dtype=float).reshape(problem.m)
    if method not in ("auto", "newton"):
        raise ValueError(f"unknown method {method!r}")
    scale = 1.0 + np.linalg.norm(problem.dynamics.control_matrix(x).T @ p)
    return _newton_minimizer(problem, x, p, tol * scale)


def hamiltonian(problem: ProblemSpec, x, p) -> float:
    x = _as_vec(x, problem.n, "x")
    p = _as_vec(p, problem.n, "p")
    u = pointwise_minimizer(problem, x, p)
    return float(problem.running_cost.value(x, u) + p @ problem.dynamics.evaluate(x, u))


def hamiltonian_gradient(problem: ProblemSpec, x: Array, p: Array) -> Tuple[Array, Array, Array]:
    """Return ``(u*, H_x, H_p)`` without second derivatives (flow right-hand side)."""
    u = pointwise_minimizer(problem, x, p)
    H_p = problem.dynamics.evaluate(x, u)
    H_x = problem.running_cost.grad_x(x, u) + problem.dynamics.jacobian(x, u).T @ p
    return u, H_x, H_p


def hamiltonian_derivatives(problem: ProblemSpec, x, p) -> HamiltonianEval:
    """Evaluate ``H`` with first and second derivatives at ``(x, p)``.

    Second derivatives come from the Schur complement of the Hessian of
    ``G(x, p, u) = L(x, u) + p . f(x, u)`` with respect to ``u``:
    ``H_zz = G_zz - G_zu G_uu^{-1} G_uz`` for ``z = (x, p)``.
    """
    x = _as_vec(x, problem.n, "x")
    p = _as_vec(p, problem.n, "p")
    dyn, L = problem.dynamics, problem.running_cost
    u = pointwise_minimizer(problem, x, p)
    F = dyn.control_matrix(x)
    fx = dyn.jacobian(x, u)
    H_p = dyn.evaluate(x, u)
    H_x = L.grad_x(x, u) + fx.T @ p
    H = float(L.value(x, u) + p @ H_p)

    G_xx = L.hess_xx(x, u) + np.einsum("k,kij->ij", p, dyn.hessian(x, u))
    G_ux = L.hess_xu(x, u).T + np.einsum("k,ikj->ij", p, dyn.control_jacobians(x))
    G_uu = L.hess_uu(x, u)
    try:
        K = np.linalg.solve(G_uu, np.hstack([G_ux, F.T]))
    except np.linalg.LinAlgError:
        raise SingularLuu(f"L_uu singular at x={x}, u={u}") from None
    Kx, Kp = K[:, : problem.n], K[:, problem.n:]
    H_xx = G_xx - G_ux.T @ Kx
    H_px = fx - F @ Kx
    H_pp = -F @ Kp
    H_xx = 0.5 * (H_xx + H_xx.T)
    H_pp = 0.5 * (H_pp + H_pp.T)
    return HamiltonianEval(u, H, H_x, H_p, H_xx, H_px, H_pp)


def hamiltonian_third_directional(problem: ProblemSpec, x: Array, p: Array, dx: Array, dp: Array,
                                  eps: Optional[float] = None) -> Tuple[Array, Array, Array]:
    """Derivatives of ``(H_xx, H_px, H_pp)`` along the phase direction ``(dx, dp)``.

    Uses the problem's exact oracle when present, otherwise a central
    difference of :func:`hamiltonian_derivatives` with step ``eps``
    relative to the size of the base point and the direction.
    """
    if problem.hamiltonian_third is not None:
        return problem.hamiltonian_third(x, p, dx, dp)
    norm = np.sqrt(dx @ dx + dp @ dp)
    if norm == 0.0:
        z = np.zeros((problem.n, problem.n))
        return z, z.copy(), z.copy()
    if eps is None:
        eps = 1e-5 * (1.0 + np.sqrt(x @ x + p @ p))
    s = eps / norm
    hp = hamiltonian_derivatives(problem, x + s * dx, p + s * dp)
    hm = hamiltonian_derivatives(problem, x - s * dx, p - s * dp)
    c = 1.0 / (2 * s)
    return c * (hp.H_xx - hm.H_xx), c * (hp.H_px - hm.H_px), c * (hp.H_pp - hm.H_pp)


# ----------------------------------------------------------------------------
# Sampled assumption checks


@dataclass(frozen=True)
class TestBox:
    """Compact region on which the global assumptions are spot-checked."""

    __test__ = False

    x_radius: float = 5.0
    u_radius: float = 5.0
    p_radius: float = 5.0


@dataclass
class AssumptionReport:
    growth_ok: bool
    coercive_ok: bool
    convex_ok: bool
    min_luu_eig: float
    max_growth_ratio: float
    samples: int

    @property
    def ok(self) -> bool:
        return self.growth_ok and self.coercive_ok and self.convex_ok


def check_assumptions(problem: ProblemSpec, box: TestBox = TestBox(), samples: int = 200,
                      seed: int = 0) -> AssumptionReport:
    """Spot-check the growth and convexity hypotheses on a test box."""
    rng = np.random.default_rng(seed)
    L = problem.running_cost
    worst_ratio, min_eig = 0.0, np.inf
    coercive = True
    for _ in range(samples):
        x = rng.uniform(-box.x_radius, box.x_radius, problem.n)
        u = rng.uniform(-box.u_radius, box.u_radius, problem.m)
        for f in problem.dynamics.fields:
            worst_ratio = max(worst_ratio, np.linalg.norm(f.value(x)) / (np.linalg.norm(x) + 1.0))
        luu = L.hess_uu(x, u)
        if not np.allclose(luu, luu.T):
            min_eig = -np.inf
        else:
            min_eig = min(min_eig, np.linalg.eigvalsh(luu)[0])
        if L.value(x, u) < problem.c2 * (u @ u - 1.0) - 1e-12:
            coercive = False
    return AssumptionReport(
        growth_ok=worst_ratio <= problem.c1 + 1e-12,
        coercive_ok=coercive,
        convex_ok=min_eig > problem.delta_L,
        min_luu_eig=float(min_eig),
        max_growth_ratio=float(worst_ratio),
        samples=samples,
    )


def _fd_jacobian(f: Callable[[Array], Array], x: Array, h: float) -> Array:
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def _rel_err(a: Array, b: Array) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / (1.0 + np.max(np.abs(b))))


def check_oracles(problem: ProblemSpec, points: Sequence[Tuple[Array, Array]], h: float = 1e-5) -> dict:
    """Compare every derivative oracle with central differences at ``(x, u)`` points.

    Returns the worst relative discrepancy per oracle; callers compare it
    against their tolerance (``1e-4`` for the stock checks).
    """
    L, psi = problem.running_cost, problem.terminal_cost
    worst: dict = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for x, u in points:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        for i, f in enumerate(problem.dynamics.fields):
            record(f"f{i}.jacobian", _rel_err(f.jacobian(x), _fd_jacobian(f.value, x, h)))
            # hessian[k, i, j] = d/dx_j of jacobian[k, i]
            record(f"f{i}.hessian", _rel_err(f.hessian(x), _fd_jacobian(f.jacobian, x, h)))
        record("L_x", _rel_err(L.grad_x(x, u), _fd_jacobian(lambda y: np.atleast_1d(L.value(y, u)), x, h)[0]))
        record("L_u", _rel_err(L.grad_u(x, u), _fd_jacobian(lambda w: np.atleast_1d(L.value(x, w)), u, h)[0]))
        record("L_xx", _rel_err(L.hess_xx(x, u), _fd_jacobian(lambda y: L.grad_x(y, u), x, h)))
        record("L_xu", _rel_err(L.hess_xu(x, u), _fd_jacobian(lambda w: L.grad_x(x, w), u, h)))
        record("L_uu", _rel_err(L.hess_uu(x, u), _fd_jacobian(lambda w: L.grad_u(x, w), u, h)))
        record("psi.gradient", _rel_err(psi.gradient(x), _fd_jacobian(lambda y: np.atleast_1d(psi.value(y)), x, h)[0]))
        record("psi.hessian", _rel_err(psi.hessian(x), _fd_jacobian(psi.gradient, x, h)))
    return worst
