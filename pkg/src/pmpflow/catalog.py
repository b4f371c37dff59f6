"""
Built-in problems and terminal-cost families.

Every catalog problem has a running cost quadratic in ``u``, so the
pointwise minimizer is available in closed form (the Newton path stays
reachable through ``pointwise_minimizer(..., method="newton")``).

Labels
------
``example21``
    x' = 1 + x u, L = u^2/2, psi = 2 exp(z + 1), T = 2.  Backward arcs can
    blow up in finite time.
``single_integrator``
    x' = u in R^n, L = |u|^2/2, psi = 0 unless a family is given.
``single_integrator_cos``
    Same dynamics with psi(z) = cos z and T = 2.
``single_integrator_quad``
    Same dynamics with psi(z) = a z^2/2 + b z.
``planar_lq``
    x' = A x + u in R^2 with A = alpha I + omega J (J the quarter turn),
    L = |u|^2/2 and psi(z) = z^T S z / 2 + c^T z.  The flow is affine and
    solvable in closed form, see :func:`planar_lq_flow`.
"""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .errors import ConfigError
from .problem import ControlAffineDynamics, ProblemSpec, RunningCost, TerminalCost, VectorField

__all__ = [
    "LABELS",
    "TERMINAL_FAMILIES",
    "make_problem",
    "make_terminal_cost",
    "planar_lq_flow",
    "tuned_planar_hessian",
]


def _const_field(n: int, c) -> VectorField:
    c = np.asarray(c, dtype=float)
    return VectorField(
        value=lambda x: c.copy(),
        jacobian=lambda x: np.zeros((n, n)),
        hessian=lambda x: np.zeros((n, n, n)),
    )


def _linear_field(A) -> VectorField:
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    return VectorField(
        value=lambda x: A @ x,
        jacobian=lambda x: A.copy(),
        hessian=lambda x: np.zeros((n, n, n)),
    )


def _quadratic_control_cost(n: int, m: int, weight: float = 1.0) -> RunningCost:
    """``L(x, u) = weight |u|^2 / 2``."""
    return RunningCost(
        value=lambda x, u: 0.5 * weight * float(u @ u),
        grad_x=lambda x, u: np.zeros(n),
        grad_u=lambda x, u: weight * u,
        hess_xx=lambda x, u: np.zeros((n, n)),
        hess_xu=lambda x, u: np.zeros((n, m)),
        hess_uu=lambda x, u: weight * np.eye(m),
        modulus=lambda s: 0.0,
        has_third=True,
    )


# ----------------------------------------------------------------------------
# terminal costs


def _zero_cost(n: int) -> TerminalCost:
    return TerminalCost(
        value=lambda z: 0.0,
        gradient=lambda z: np.zeros(n),
        hessian=lambda z: np.zeros((n, n)),
        third=lambda z, v: np.zeros(n),
        lower_bound=0.0,
        label="zero",
    )


def _cos_cost(n: int, amplitude: float = 1.0, frequency: float = 1.0) -> TerminalCost:
    a, w = float(amplitude), float(frequency)
    return TerminalCost(
        value=lambda z: a * float(np.sum(np.cos(w * z))),
        gradient=lambda z: -a * w * np.sin(w * z),
        hessian=lambda z: np.diag(-a * w**2 * np.cos(w * z)),
        third=lambda z, v: a * w**3 * np.sin(w * z) * v**2,
        lower_bound=-abs(a) * n,
        label="cos",
    )


def _quadratic_cost(n: int, hessian, linear=None, constant: float = 0.0) -> TerminalCost:
    S = np.asarray(hessian, dtype=float)
    if S.size == n * n:
        S = S.reshape(n, n)
    if S.shape != (n, n):
        raise ConfigError(f"terminal Hessian must be {n}x{n}")
    S = 0.5 * (S + S.T)
    c = np.zeros(n) if linear is None else np.asarray(linear, dtype=float).reshape(n)
    k = float(constant)
    eig = np.linalg.eigvalsh(S)
    if eig[0] > 0:
        lower = k - 0.5 * float(c @ np.linalg.solve(S, c))
    elif np.allclose(S, 0) and np.allclose(c, 0):
        lower = k
    else:
        lower = -np.inf
    return TerminalCost(
        value=lambda z: 0.5 * float(z @ S @ z) + float(c @ z) + k,
        gradient=lambda z: S @ z + c,
        hessian=lambda z: S.copy(),
        third=lambda z, v: np.zeros(n),
        lower_bound=lower,
        label="quadratic",
    )


def _exp_cost(n: int, amplitude: float = 2.0, rate: float = 1.0, shift: float = 1.0) -> TerminalCost:
    """``amplitude * exp(rate * sum(z) + shift)``."""
    a, r, s = float(amplitude), float(rate), float(shift)
    ones = np.ones(n)

    def e(z):
        return np.exp(r * np.sum(z) + s)

    return TerminalCost(
        value=lambda z: a * float(e(z)),
        gradient=lambda z: a * r * e(z) * ones,
        hessian=lambda z: a * r**2 * e(z) * np.ones((n, n)),
        third=lambda z, v: a * r**3 * e(z) * np.sum(v) ** 2 * ones,
        lower_bound=-np.inf if a < 0 else 0.0,
        label="exp",
    )


def _poly_cost(n: int, coefficients, lower_bound: float = -np.inf) -> TerminalCost:
    """Scalar polynomial ``sum_k c_k z^k``; only defined for ``n = 1``."""
    if n != 1:
        raise ConfigError("polynomial terminal costs are scalar (n = 1)")
    P = np.polynomial.Polynomial(np.asarray(coefficients, dtype=float))
    d1, d2, d3 = P.deriv(1), P.deriv(2), P.deriv(3)
    return TerminalCost(
        value=lambda z: float(P(z[0])),
        gradient=lambda z: np.array([d1(z[0])]),
        hessian=lambda z: np.array([[d2(z[0])]]),
        third=lambda z, v: np.array([d3(z[0]) * v[0] ** 2]),
        lower_bound=float(lower_bound),
        label="poly",
    )


TERMINAL_FAMILIES: Dict[str, Callable[..., TerminalCost]] = {
    "zero": _zero_cost,
    "cos": _cos_cost,
    "quadratic": _quadratic_cost,
    "exp": _exp_cost,
    "poly": _poly_cost,
}


def make_terminal_cost(family: str, n: int, **coefficients) -> TerminalCost:
    """Build a terminal cost from a named family and its coefficients."""
    try:
        factory = TERMINAL_FAMILIES[family]
    except KeyError:
        raise ConfigError(f"unknown terminal-cost family {family!r}; choose from {sorted(TERMINAL_FAMILIES)}") from None
    try:
        return factory(n, **coefficients)
    except TypeError as exc:
        raise ConfigError(f"bad coefficients for terminal family {family!r}: {exc}") from None


# ----------------------------------------------------------------------------
# problems


def _example21(T: float = 2.0, psi: Optional[TerminalCost] = None) -> ProblemSpec:
    n = m = 1
    dyn = ControlAffineDynamics((
        _const_field(1, [1.0]),
        _linear_field([[1.0]]),
    ))

    def third(x, p, dx, dp):
        # H = p - p^2 x^2 / 2
        return (np.array([[-2 * p[0] * dp[0]]]),
                np.array([[-2 * (x[0] * dp[0] + p[0] * dx[0])]]),
                np.array([[-2 * x[0] * dx[0]]]))

    return ProblemSpec(
        n=n, m=m, T=T, dynamics=dyn,
        running_cost=_quadratic_control_cost(n, m),
        terminal_cost=psi or _exp_cost(1, 2.0, 1.0, 1.0),
        c1=1.0, c2=0.25, delta_L=0.5, label="example21",
        minimizer=lambda x, p: -p * x,
        hamiltonian_third=third,
    )


def _single_integrator(n: int = 1, T: float = 2.0, psi: Optional[TerminalCost] = None,
                       label: str = "single_integrator") -> ProblemSpec:
    dyn = ControlAffineDynamics((_const_field(n, np.zeros(n)),)
                                + tuple(_const_field(n, np.eye(n)[i]) for i in range(n)))
    zeros = np.zeros((n, n))
    return ProblemSpec(
        n=n, m=n, T=T, dynamics=dyn,
        running_cost=_quadratic_control_cost(n, n),
        terminal_cost=psi or _zero_cost(n),
        c1=1.0, c2=0.25, delta_L=0.5, label=label,
        minimizer=lambda x, p: -p,
        hamiltonian_third=lambda x, p, dx, dp: (zeros, zeros, zeros),
    )


def _planar_lq(alpha: float = 0.3, omega: float = 0.5, T: float = 1.0, hessian=None, linear=None,
               psi: Optional[TerminalCost] = None) -> ProblemSpec:
    n = m = 2
    A = alpha * np.eye(2) + omega * np.array([[0.0, -1.0], [1.0, 0.0]])
    if psi is None:
        S = np.diag([0.5, 1.0]) if hessian is None else hessian
        psi = _quadratic_cost(2, S, linear if linear is not None else [0.2, -0.1])
    dyn = ControlAffineDynamics((_linear_field(A), _const_field(2, [1.0, 0.0]), _const_field(2, [0.0, 1.0])))
    zeros = np.zeros((2, 2))
    return ProblemSpec(
        n=n, m=m, T=T, dynamics=dyn,
        running_cost=_quadratic_control_cost(n, m),
        terminal_cost=psi,
        c1=max(1.0, float(np.linalg.norm(A, 2))), c2=0.25, delta_L=0.5, label="planar_lq",
        minimizer=lambda x, p: -p,
        hamiltonian_third=lambda x, p, dx, dp: (zeros, zeros, zeros),
        params={"alpha": alpha, "omega": omega, "A": A},
    )


LABELS = ("example21", "single_integrator", "single_integrator_cos", "single_integrator_quad", "planar_lq")


def make_problem(label: str, params: Optional[Mapping[str, object]] = None, psi_family: Optional[str] = None,
                 psi_params: Optional[Mapping[str, object]] = None) -> ProblemSpec:
    """Instantiate a catalog problem.

    Parameters
    ----------
    label : str
        One of :data:`LABELS`.
    params : mapping, optional
        Problem parameters (``T``, ``n`` for the single integrator, ``alpha``,
        ``omega``, ``hessian``, ``linear`` for ``planar_lq``, ``a`` and ``b``
        for ``single_integrator_quad``).
    psi_family, psi_params : optional
        Override the default terminal cost with a family from
        :data:`TERMINAL_FAMILIES`.
    """
    params = dict(params or {})
    psi = None
    if psi_family is not None:
        n = 2 if label == "planar_lq" else int(params.get("n", 1))
        psi = make_terminal_cost(psi_family, n, **dict(psi_params or {}))
    try:
        if label == "example21":
            return _example21(psi=psi, **params)
        if label == "single_integrator":
            return _single_integrator(psi=psi, **params)
        if label == "single_integrator_cos":
            n = int(params.pop("n", 1))
            return _single_integrator(n=n, psi=psi or _cos_cost(n), label=label, **params)
        if label == "single_integrator_quad":
            n = int(params.pop("n", 1))
            a = params.pop("a", 0.5)
            b = params.pop("b", 0.0)
            if psi is None:
                psi = _quadratic_cost(n, np.eye(n) * float(a), np.full(n, float(b)))
            return _single_integrator(n=n, psi=psi, label=label, **params)
        if label == "planar_lq":
            return _planar_lq(psi=psi, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for problem {label!r}: {exc}") from None
    raise ConfigError(f"unknown problem label {label!r}; choose from {LABELS}")


# ----------------------------------------------------------------------------
# closed forms for the planar LQ problem


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def planar_lq_flow(alpha: float, omega: float, T: float, z, q, t: float = 0.0):
    """Closed-form backward solution of ``planar_lq`` from ``x(T) = z, p(T) = q``.

    With ``A = alpha I + omega J`` the costate is ``p(t) = exp(A^T (T - t)) q``
    and

        x(t) = e^{-alpha s} R(-omega s) z + R(-omega s) sinh(alpha s)/alpha q,

    where ``s = T - t``.  Returns ``(x(t), p(t))``.
    """
    z = np.asarray(z, dtype=float)
    q = np.asarray(q, dtype=float)
    s = T - t
    R = _rotation(-omega * s)
    gain = s if alpha == 0 else np.sinh(alpha * s) / alpha
    x = np.exp(-alpha * s) * R @ z + gain * R @ q
    p = np.exp(alpha * s) * R @ q
    return x, p


def tuned_planar_hessian(alpha: float, omega: float, T: float, singular_values=(0.0, 2.0),
                         angle: float = 0.4) -> np.ndarray:
    """Terminal Hessian ``S`` for which ``x_z(0, z)`` has the given singular values.

    The symmetric factor ``e^{-alpha T} I + sinh(alpha T)/alpha S`` is set to
    ``R(angle) diag(singular_values) R(angle)^T``; the null direction of
    ``x_z(0, z)`` is then ``R(angle) e_1``.
    """
    gain = T if alpha == 0 else np.sinh(alpha * T) / alpha
    Rk = _rotation(angle)
    target = Rk @ np.diag(singular_values) @ Rk.T
    return (target - np.exp(-alpha * T) * np.eye(2)) / gain
