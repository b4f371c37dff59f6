"""
Backward integration of the Pontryagin system and its variational equations.

From terminal data ``x(T) = z, p(T) = grad psi(z)`` the system

    x' = H_p(x, p),      p' = -H_x(x, p)

is integrated backward to ``t = 0`` with an adaptive Dormand-Prince 5(4)
pair.  The integration stops as soon as ``|x| + |p|`` reaches the escape
radius; such arcs are flagged as escaped and refused by every analysis
that needs the flow on all of ``[0, T]``.

The first variation ``(X, Y) = (x_z, p_z)`` solves the linear system

    X' = H_px X + H_pp Y,      Y' = -H_xx X - H_xp Y,

with ``X(T) = I`` and ``Y(T) = D^2 psi(z)``.  Differentiating once more
along a direction ``v`` gives the second variation ``(Xi, Pi)``, which is
available either by central differences of ``X v`` (default) or by
integrating the differentiated system directly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy.integrate import RK45, OdeSolution

from .errors import EscapedArc, EscapedNeighborhood, StepSizeUnderflow
from .problem import (
    ProblemSpec,
    TerminalCost,
    hamiltonian_derivatives,
    hamiltonian_third_directional,
)

__all__ = [
    "FlowOptions",
    "ExtremalArc",
    "ArcSamples",
    "VariationalBundle",
    "SecondVariation",
    "integrate_backward",
    "integrate_variational",
    "flow_jacobian",
    "second_variation_along",
    "hamiltonian_drift",
    "propagate",
    "ode_residual",
    "running_cost_integral",
    "export_arc",
    "COMPLETE",
    "ESCAPED",
]

COMPLETE = "complete"
ESCAPED = "escaped"


@dataclass(frozen=True)
class FlowOptions:
    """Integrator settings shared by all flow computations.

    ``escape_radius`` is the threshold on ``|x| + |p|`` past which a
    backward arc is declared escaped.
    """

    rtol: float = 1e-9
    atol: float = 1e-12
    max_step: float = np.inf
    escape_radius: float = 1e3
    n_samples: int = 512

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("integrator tolerances must be positive")
        if not self.escape_radius > 0:
            raise ValueError("escape radius must be positive")
        if self.n_samples < 2:
            raise ValueError("need at least two dense-output samples")


DEFAULT_OPTIONS = FlowOptions()


def _ustar(problem: ProblemSpec, x, p):
    if problem.minimizer is not None:
        return np.asarray(problem.minimizer(x, p), dtype=float).reshape(problem.m)
    from .problem import pointwise_minimizer

    return pointwise_minimizer(problem, x, p)


def _gradient(problem: ProblemSpec, x, p):
    u = _ustar(problem, x, p)
    dyn = problem.dynamics
    H_p = dyn.evaluate(x, u)
    H_x = problem.running_cost.grad_x(x, u) + dyn.jacobian(x, u).T @ p
    return u, H_x, H_p


def _make_rhs(problem: ProblemSpec, k: int, direction: Optional[np.ndarray]):
    """Right-hand side of the (possibly augmented) backward system.

    State layout: ``[x, p, Z.ravel(), Xi, Pi]`` where ``Z`` is ``2n x k``
    and the trailing second-variation block is present only when a
    direction is given (then ``Z`` holds ``(X, Y)`` with ``k = n``).
    """
    n = problem.n
    if k == 0:
        def rhs(t, y):
            _, H_x, H_p = _gradient(problem, y[:n], y[n:2 * n])
            return np.concatenate([H_p, -H_x])

        return rhs

    def rhs(t, y):
        x, p = y[:n], y[n:2 * n]
        h = hamiltonian_derivatives(problem, x, p)
        Z = y[2 * n:2 * n + 2 * n * k].reshape(2 * n, k)
        Zx, Zp = Z[:n], Z[n:]
        dZ = np.vstack([h.H_px @ Zx + h.H_pp @ Zp, -h.H_xx @ Zx - h.H_xp @ Zp])
        parts = [h.H_p, -h.H_x, dZ.ravel()]
        if direction is not None:
            xi, pi = Zx @ direction, Zp @ direction
            Xi = y[2 * n + 2 * n * k:3 * n + 2 * n * k]
            Pi = y[3 * n + 2 * n * k:]
            dxx, dpx, dpp = hamiltonian_third_directional(problem, x, p, xi, pi)
            parts.append(h.H_px @ Xi + h.H_pp @ Pi + dpx @ xi + dpp @ pi)
            parts.append(-h.H_xx @ Xi - h.H_xp @ Pi - dxx @ xi - dpx.T @ pi)
        return np.concatenate(parts)

    return rhs


@dataclass
class _Run:
    ts: list
    interpolants: list
    y_end: np.ndarray
    t_end: float
    escaped: bool


def _run(problem: ProblemSpec, t0: float, y0: np.ndarray, t1: float, k: int, direction, opts: FlowOptions,
         keep_dense: bool = True) -> _Run:
    n = problem.n
    if not np.all(np.isfinite(y0[:2 * n])) or (
            np.linalg.norm(y0[:n]) + np.linalg.norm(y0[n:2 * n]) >= opts.escape_radius):
        # terminal data already outside the escape radius
        return _Run([t0], [], np.array(y0, dtype=float), t0, True)
    rhs = _make_rhs(problem, k, direction)
    solver = RK45(rhs, t0, y0, t1, rtol=opts.rtol, atol=opts.atol, max_step=opts.max_step)
    ts, interps = [t0], []
    escaped = False
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise StepSizeUnderflow(f"integration failed at t={solver.t:.6g}: {msg}")
        y = solver.y
        if keep_dense:
            ts.append(solver.t)
            interps.append(solver.dense_output())
        if not np.all(np.isfinite(y[:2 * n])) or (
                np.linalg.norm(y[:n]) + np.linalg.norm(y[n:2 * n]) >= opts.escape_radius):
            escaped = True
            break
    return _Run(ts, interps, solver.y.copy(), solver.t, escaped)


@dataclass(frozen=True)
class ArcSamples:
    """Dense samples of an extremal, ordered by increasing ``t``."""

    t: np.ndarray
    x: np.ndarray
    p: np.ndarray
    u: np.ndarray
    H: np.ndarray


@dataclass(frozen=True, eq=False)
class ExtremalArc:
    """Backward solution ``t -> (x, p, u)`` from the terminal point ``z``.

    ``status`` is :data:`COMPLETE` when the flow reached ``t = 0`` and
    :data:`ESCAPED` otherwise; in the latter case ``tau`` is the time of
    the first integrator step with ``|x| + |p|`` past the escape radius and
    the arc lives on ``[tau, T]``.
    """

    problem: ProblemSpec = field(repr=False)
    psi: TerminalCost = field(repr=False)
    z: np.ndarray
    status: str
    tau: Optional[float]
    t_start: float
    x_start: np.ndarray
    p_start: np.ndarray
    step_times: np.ndarray = field(repr=False)
    solution: Optional[OdeSolution] = field(repr=False)
    n_samples: int = field(default=512, repr=False)

    @property
    def complete(self) -> bool:
        return self.status == COMPLETE

    @property
    def T(self) -> float:
        return self.problem.T

    @property
    def x0(self) -> np.ndarray:
        """``x`` at the left end of the arc (``t = 0`` when complete)."""
        return self.x_start

    @property
    def p0(self) -> np.ndarray:
        return self.p_start

    def state(self, t) -> Tuple[np.ndarray, np.ndarray]:
        """Interpolated ``(x(t), p(t))``; ``t`` may be scalar or an array."""
        if self.solution is None:
            raise ValueError("arc was integrated without dense output")
        y = self.solution(t)
        n = self.problem.n
        return y[:n], y[n:2 * n]

    @cached_property
    def sample_times(self) -> np.ndarray:
        grid = np.linspace(self.t_start, self.T, self.n_samples)
        return np.unique(np.concatenate([grid, self.step_times]))

    @cached_property
    def samples(self) -> ArcSamples:
        if self.solution is None and self.t_start == self.T:
            # escaped before the first step: only the terminal point exists
            t = np.array([self.T])
            x, p = self.z[None, :].copy(), self.p_start[None, :].copy()
        else:
            t = self.sample_times
            x, p = self.state(t)
            x, p = x.T.copy(), p.T.copy()
        u = np.array([_ustar(self.problem, xi, pi) for xi, pi in zip(x, p)])
        L = self.problem.running_cost
        dyn = self.problem.dynamics
        H = np.array([L.value(xi, ui) + pi @ dyn.evaluate(xi, ui) for xi, pi, ui in zip(x, p, u)])
        return ArcSamples(t, x, p, u, H)

    @cached_property
    def terminal_hamiltonian(self) -> float:
        z, q = self.z, self.psi.gradient(self.z)
        u = _ustar(self.problem, z, q)
        return float(self.problem.running_cost.value(z, u) + q @ self.problem.dynamics.evaluate(z, u))


@dataclass(frozen=True, eq=False)
class VariationalBundle:
    """First variation ``X = x_z(t, z)``, ``Y = p_z(t, z)`` along an arc."""

    z: np.ndarray
    X0: np.ndarray
    Y0: np.ndarray
    solution: OdeSolution = field(repr=False)
    n: int = field(repr=False)
    k: int = field(repr=False)
    sample_times: np.ndarray = field(repr=False)

    def at(self, t) -> Tuple[np.ndarray, np.ndarray]:
        y = self.solution(t)
        n, k = self.n, self.k
        Z = y[2 * n:2 * n + 2 * n * k]
        if np.ndim(t) == 0:
            Z = Z.reshape(2 * n, k)
            return Z[:n], Z[n:]
        Z = Z.T.reshape(-1, 2 * n, k)
        return Z[:, :n], Z[:, n:]

    @cached_property
    def samples(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(t, X, Y)`` on the arc's sample grid; ``X`` has shape ``(K, n, k)``."""
        X, Y = self.at(self.sample_times)
        return self.sample_times, X, Y


@dataclass(frozen=True)
class SecondVariation:
    """``Xi = x_zz(0, z)(v, v)`` and ``Pi = p_zz(0, z)(v, v)``."""

    v: np.ndarray
    xi0: np.ndarray
    pi0: np.ndarray
    method: str


def _terminal_state(problem: ProblemSpec, psi: TerminalCost, z) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float).reshape(problem.n)
    return z, np.asarray(psi.gradient(z), dtype=float).reshape(problem.n)


def _build_arc(problem, psi, z, run: _Run, opts: FlowOptions, dense: bool) -> ExtremalArc:
    n = problem.n
    ts = np.asarray(run.ts)
    sol = OdeSolution(ts, run.interpolants) if dense and len(run.interpolants) else None
    return ExtremalArc(
        problem=problem, psi=psi, z=z,
        status=ESCAPED if run.escaped else COMPLETE,
        tau=float(run.t_end) if run.escaped else None,
        t_start=float(run.t_end),
        x_start=run.y_end[:n].copy(), p_start=run.y_end[n:2 * n].copy(),
        step_times=ts, solution=sol, n_samples=opts.n_samples,
    )


def integrate_backward(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
                       opts: FlowOptions = DEFAULT_OPTIONS, dense: bool = True) -> ExtremalArc:
    """Integrate the Pontryagin system backward from ``x(T) = z``.

    Parameters
    ----------
    problem : ProblemSpec
    z : array_like
        Terminal point.
    psi : TerminalCost, optional
        Terminal cost; defaults to ``problem.terminal_cost``.
    opts : FlowOptions
    dense : bool
        Keep the dense interpolant (needed for samples and costs).  Shooting
        loops that only need ``x(0)`` switch it off.

    Raises
    ------
    StepSizeUnderflow
        If the step size collapses before the escape radius is reached.
    """
    psi = psi or problem.terminal_cost
    z, q = _terminal_state(problem, psi, z)
    run = _run(problem, problem.T, np.concatenate([z, q]), 0.0, 0, None, opts, keep_dense=dense)
    return _build_arc(problem, psi, z, run, opts, dense)


def _variational_run(problem, psi, z, Z0, direction, second0, opts):
    z, q = _terminal_state(problem, psi, z)
    parts = [z, q, Z0.ravel()]
    if direction is not None:
        parts.append(second0)
    run = _run(problem, problem.T, np.concatenate(parts), 0.0, Z0.shape[1], direction, opts)
    arc = _build_arc(problem, psi, z, run, opts, True)
    if run.escaped:
        raise EscapedArc(z, run.t_end)
    return arc, run


def integrate_variational(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
                          opts: FlowOptions = DEFAULT_OPTIONS) -> Tuple[ExtremalArc, VariationalBundle]:
    """Integrate the arc together with ``x_z`` and ``p_z``.

    Raises :class:`EscapedArc` when the arc does not reach ``t = 0``.
    """
    psi = psi or problem.terminal_cost
    n = problem.n
    z = np.asarray(z, dtype=float).reshape(n)
    Z0 = np.vstack([np.eye(n), psi.hessian(z)])
    arc, run = _variational_run(problem, psi, z, Z0, None, None, opts)
    bundle = _bundle(arc, run, n, n)
    return arc, bundle


def _bundle(arc: ExtremalArc, run: _Run, n: int, k: int) -> VariationalBundle:
    Z = run.y_end[2 * n:2 * n + 2 * n * k].reshape(2 * n, k)
    return VariationalBundle(
        z=arc.z, X0=Z[:n].copy(), Y0=Z[n:].copy(), solution=arc.solution, n=n, k=k,
        sample_times=arc.sample_times,
    )


def flow_jacobian(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
                  opts: FlowOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Jacobian of ``(x(0), p(0))`` with respect to the terminal pair ``(x(T), p(T))``.

    Evaluated at ``(z, grad psi(z))`` by integrating the linearized system
    from the ``2n`` canonical terminal directions.  The result is
    symplectic: ``M^T J M = J``.
    """
    psi = psi or problem.terminal_cost
    n = problem.n
    Z0 = np.eye(2 * n)
    _, run = _variational_run(problem, psi, z, Z0, None, None, opts)
    return run.y_end[2 * n:].reshape(2 * n, 2 * n).copy()


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("direction must be nonzero")
    return v / nv


def second_variation_along(problem: ProblemSpec, z, v, psi: Optional[TerminalCost] = None,
                           opts: FlowOptions = DEFAULT_OPTIONS, method: str = "fd",
                           step: Optional[float] = None) -> SecondVariation:
    """Second derivative of ``z -> (x(0, z), p(0, z))`` along the unit direction ``v``.

    ``method="fd"`` differences ``X(0) v`` and ``Y(0) v`` at ``z +- h v`` with
    ``h = 1e-4 (1 + |z|)`` and one Richardson extrapolation step.
    ``method="ode"`` integrates the differentiated variational system with
    terminal data ``Xi(T) = 0`` and ``Pi(T) = D^3 psi(z)(v, v)``.
    """
    psi = psi or problem.terminal_cost
    n = problem.n
    z = np.asarray(z, dtype=float).reshape(n)
    v = _unit(v).reshape(n)
    if method == "ode":
        Z0 = np.vstack([np.eye(n), psi.hessian(z)])
        second0 = np.concatenate([np.zeros(n), psi.third_directional(z, v)])
        _, run = _variational_run(problem, psi, z, Z0, v, second0, opts)
        tail = run.y_end[2 * n + 2 * n * n:]
        return SecondVariation(v, tail[:n].copy(), tail[n:].copy(), "ode")
    if method != "fd":
        raise ValueError(f"unknown second-variation method {method!r}")
    h = step if step is not None else 1e-4 * (1.0 + np.linalg.norm(z))

    def tangent(zz):
        try:
            _, b = integrate_variational(problem, zz, psi, opts)
        except EscapedArc as exc:
            raise EscapedNeighborhood(f"z={zz} left the complete-arc domain (tau={exc.tau:.4g})") from None
        return b.X0 @ v, b.Y0 @ v

    def central(hh):
        xp, pp = tangent(z + hh * v)
        xm, pm = tangent(z - hh * v)
        return (xp - xm) / (2 * hh), (pp - pm) / (2 * hh)

    xi_h, pi_h = central(h)
    xi_h2, pi_h2 = central(h / 2)
    return SecondVariation(v, (4 * xi_h2 - xi_h) / 3, (4 * pi_h2 - pi_h) / 3, "fd")


def hamiltonian_drift(arc: ExtremalArc, t_min: Optional[float] = None) -> float:
    """Largest deviation of ``H`` along the samples from its terminal value."""
    s = arc.samples
    mask = np.ones_like(s.t, dtype=bool) if t_min is None else s.t >= t_min
    return float(np.max(np.abs(s.H[mask] - arc.terminal_hamiltonian)))


def propagate(problem: ProblemSpec, t_from: float, x, p, t_to: float,
              opts: FlowOptions = DEFAULT_OPTIONS) -> Tuple[np.ndarray, np.ndarray]:
    """Carry a phase point ``(x, p)`` from ``t_from`` to ``t_to`` along the flow."""
    n = problem.n
    y0 = np.concatenate([np.asarray(x, dtype=float).reshape(n), np.asarray(p, dtype=float).reshape(n)])
    run = _run(problem, t_from, y0, t_to, 0, None, opts, keep_dense=False)
    if run.escaped:
        raise EscapedArc(y0[:n], run.t_end)
    return run.y_end[:n].copy(), run.y_end[n:].copy()


def ode_residual(arc: ExtremalArc, opts: FlowOptions = DEFAULT_OPTIONS, per_step: int = 4) -> float:
    """Step-scaled defect of the dense output, in units of the integrator tolerance.

    The interpolant of every integrator step is differentiated exactly at
    ``per_step`` interior points and compared with the right-hand side.
    The defect is multiplied by the step length and divided by
    ``atol + rtol |y|`` (``|y|`` taken at the step ends, as the error control does), so a value of order one means the interpolant
    satisfies the ODE as well as the error control asked for.
    """
    if arc.solution is None:
        raise ValueError("arc was integrated without dense output")
    n = arc.problem.n
    rhs = _make_rhs(arc.problem, 0, None)
    fractions = (np.arange(per_step) + 0.5) / per_step
    worst = 0.0
    for interp in arc.solution.interpolants:
        # RK dense output: y(t) = y_old + h Q [s, s^2, s^3, s^4], s = (t - t_old) / h
        Q = interp.Q[:2 * n]
        powers = np.arange(1, Q.shape[1] + 1)
        ends = np.abs(np.vstack([interp(interp.t_old)[:2 * n], interp(interp.t_old + interp.h)[:2 * n]]))
        scale = opts.atol + opts.rtol * ends.max(axis=0)
        for s in fractions:
            dy = Q @ (powers * s ** (powers - 1))
            y = interp(interp.t_old + s * interp.h)[:2 * n]
            defect = np.abs(interp.h) * np.abs(dy - rhs(0.0, y)) / scale
            worst = max(worst, float(np.max(defect)))
    return worst


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(6)


def running_cost_integral(arc: ExtremalArc) -> float:
    """Integral of ``L(x, u*)`` over the arc by 6-point Gauss-Legendre per integrator step."""
    problem = arc.problem
    ts = np.sort(arc.step_times)
    a, b = ts[:-1], ts[1:]
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    x, p = arc.state(nodes)
    L = problem.running_cost
    vals = np.array([L.value(xi, _ustar(problem, xi, pi)) for xi, pi in zip(x.T, p.T)])
    return float(weights @ vals)


def export_arc(arc: ExtremalArc, csv_path, json_path=None, config_hash: Optional[str] = None) -> None:
    """Write the dense samples as CSV (``t,x1..xn,p1..pn,u1..um,H``) plus a JSON status sidecar."""
    from .io import fmt

    s = arc.samples
    n, m = arc.problem.n, arc.problem.m
    header = (["t"] + [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)]
              + [f"u{i + 1}" for i in range(m)] + ["H"])
    with open(csv_path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for k in range(s.t.size):
            w.writerow([fmt(s.t[k])] + [fmt(v) for v in s.x[k]] + [fmt(v) for v in s.p[k]]
                       + [fmt(v) for v in s.u[k]] + [fmt(s.H[k])])
    if json_path is not None:
        meta = {
            "z": arc.z.tolist(),
            "status": arc.status,
            "tau": arc.tau,
            "terminal_cost": arc.psi.label,
            "problem": arc.problem.label,
            "x_start": arc.x_start.tolist(),
            "t_start": arc.t_start,
        }
        if config_hash:
            meta["config_hash"] = config_hash
        with open(json_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
