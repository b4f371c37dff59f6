"""
Conjugate points: rank deficiency of ``x_z(0, z)`` and the second-order residual.

A terminal point ``z`` carries a conjugate point ``y = x(0, z)`` when the
Jacobian ``X(0) = x_z(0, z)`` drops rank.  For a null direction ``v`` the
pair

    Phi(z, v) = ( X(0) v ,  (Y(0) v)^T  Xi(0) ),    Xi(0) = x_zz(0, z)(v, v),

vanishes exactly on the set of degenerate conjugate directions; for a
generic terminal cost that set has dimension ``n - 2`` and is empty in one
dimension.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ._parallel import parallel_map
from .errors import EscapedArc, EscapedNeighborhood
from .flow import DEFAULT_OPTIONS, FlowOptions, integrate_variational, second_variation_along
from .problem import ProblemSpec, TerminalCost

__all__ = [
    "RankTest",
    "OmegaResidual",
    "ConjugateCandidate",
    "LocusSweep",
    "rank_test",
    "omega_psi_residual",
    "sweep_locus",
    "gamma_psi_points",
    "canonical_sign",
    "write_locus_csv",
]

RANK_TOL = 1e-8
DET_TOL = 1e-10
OMEGA_TOL = 1e-6
GAP_TOL = 1e-6


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its largest-magnitude component is positive."""
    v = np.asarray(v, dtype=float)
    k = int(np.argmax(np.abs(v)))
    return -v if v[k] < 0 else v


@dataclass(frozen=True)
class RankTest:
    sigma_min: float
    v: np.ndarray
    singular_values: np.ndarray
    null_basis: np.ndarray
    X0: np.ndarray = field(repr=False)
    Y0: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)
    conjugate: bool = False

    def __iter__(self):
        yield self.sigma_min
        yield self.v


def _rank_from_bundle(X0, Y0, x0, rank_tol: float) -> RankTest:
    _, s, Vt = np.linalg.svd(X0)
    sigma_min = float(s[-1])
    v = canonical_sign(Vt[-1])
    close = s - sigma_min < GAP_TOL
    basis = np.array([canonical_sign(Vt[i]) for i in np.flatnonzero(close)[::-1]]).T
    flag = sigma_min <= rank_tol * (1.0 + np.linalg.norm(X0, 2))
    return RankTest(sigma_min, v, s, basis, X0, Y0, x0, bool(flag))


def rank_test(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
              opts: FlowOptions = DEFAULT_OPTIONS, rank_tol: float = RANK_TOL) -> RankTest:
    """Smallest singular value of ``x_z(0, z)`` and its right singular vector.

    The result unpacks as ``sigma_min, v = rank_test(...)``.  ``conjugate``
    is set when ``sigma_min <= rank_tol (1 + |X(0)|)``.  When the two
    smallest singular values are closer than ``1e-6`` every near-null
    direction is kept in ``null_basis`` (columns).
    """
    arc, bundle = integrate_variational(problem, z, psi, opts)
    return _rank_from_bundle(bundle.X0, bundle.Y0, arc.x0, rank_tol)


@dataclass(frozen=True)
class OmegaResidual:
    """``(X(0) v, (Y(0) v)^T Xi(0))`` together with the membership decision."""

    first: np.ndarray
    second: float
    member: bool

    @property
    def vector(self) -> np.ndarray:
        return np.append(self.first, self.second)


def omega_psi_residual(problem: ProblemSpec, z, v, psi: Optional[TerminalCost] = None,
                       opts: FlowOptions = DEFAULT_OPTIONS, rank_tol: float = RANK_TOL,
                       omega_tol: float = OMEGA_TOL, method: str = "fd") -> OmegaResidual:
    """Evaluate the degeneracy map at ``(z, v)``.

    ``(z, v)`` is declared a member when ``|X(0) v| <= rank_tol (1 + |X(0)|)``
    and ``|(Y(0) v)^T Xi(0)| <= omega_tol``.  ``method`` selects the second
    variation (``"fd"`` or ``"ode"``).
    """
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    _, bundle = integrate_variational(problem, z, psi, opts)
    sv = second_variation_along(problem, z, v, psi, opts, method=method)
    first = bundle.X0 @ v
    second = float((bundle.Y0 @ v) @ sv.xi0)
    member = (np.linalg.norm(first) <= rank_tol * (1.0 + np.linalg.norm(bundle.X0, 2))
              and abs(second) <= omega_tol)
    return OmegaResidual(first, second, bool(member))


@dataclass(frozen=True)
class ConjugateCandidate:
    """A terminal point with (near) singular ``x_z(0, z)``.

    The residual is cubic in ``v``, so each null direction is oriented to
    make its residual non-positive.
    ``omega_residual`` is the second component of the degeneracy map for
    ``v``; ``basis_residuals`` repeats it for every vector of
    ``null_basis`` when the smallest singular value is not simple.
    ``no_earlier_conjugate`` is the sufficiency proxy for weak local
    optimality: ``det x_z(t, z)`` keeps its sign for ``t`` in ``(0, T]``.
    It is evidence, not a certificate.
    """

    z: np.ndarray
    sigma_min: float
    v: np.ndarray
    omega_residual: float
    y: np.ndarray
    det: float
    refined: bool
    member: bool
    null_basis: np.ndarray = field(repr=False)
    basis_residuals: Tuple[float, ...] = field(repr=False, default=())
    no_earlier_conjugate: bool = True


@dataclass(frozen=True)
class LocusSweep:
    candidates: List[ConjugateCandidate]
    escaped_nodes: np.ndarray
    skipped_segments: int
    n_nodes: int
    grid_shape: Tuple[int, ...]


def _grid(z_box, grid_per_axis) -> Tuple[List[np.ndarray], Tuple[int, ...]]:
    box = np.atleast_2d(np.asarray(z_box, dtype=float))
    n = box.shape[0]
    counts = np.broadcast_to(np.asarray(grid_per_axis, dtype=int), (n,))
    if np.any(counts < 2):
        raise ValueError("need at least two grid nodes per axis")
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]
    return axes, tuple(int(c) for c in counts)


def _node_eval(problem, psi, opts):
    def evaluate(z):
        try:
            arc, bundle = integrate_variational(problem, z, psi, opts)
        except EscapedArc:
            return None
        X0 = bundle.X0
        s = np.linalg.svd(X0, compute_uv=False)
        return float(np.linalg.det(X0)), float(s[-1]), float(s[0])

    return evaluate


def _det_at(problem, psi, opts, z):
    _, bundle = integrate_variational(problem, z, psi, opts)
    return float(np.linalg.det(bundle.X0))


def _bisect(problem, psi, opts, za, zb, da, det_tol, max_iter=200):
    """Bisection on ``det X(0)`` along the segment ``[za, zb]`` (signs differ)."""
    a, b = za.copy(), zb.copy()
    zm, dm = a, da
    for _ in range(max_iter):
        zm = 0.5 * (a + b)
        try:
            dm = _det_at(problem, psi, opts, zm)
        except EscapedArc:
            return zm, np.nan, False
        if abs(dm) <= det_tol:
            return zm, dm, True
        if np.sign(dm) == np.sign(da):
            a, da = zm, dm
        else:
            b = zm
        if np.linalg.norm(b - a) <= 4 * np.finfo(float).eps * (1.0 + np.linalg.norm(zm)):
            break
    return zm, dm, abs(dm) <= det_tol


def _finalize(problem, psi, opts, rank_tol, omega_tol, det_tol, second_method):
    def finish(item):
        z, refined = item
        arc, bundle = integrate_variational(problem, z, psi, opts)
        rt = _rank_from_bundle(bundle.X0, bundle.Y0, arc.x0, rank_tol)
        basis = rt.null_basis.copy()
        residuals = []
        try:
            for j, w in enumerate(basis.T):
                sv = second_variation_along(problem, z, w, psi, opts, method=second_method)
                r = float((bundle.Y0 @ w) @ sv.xi0)
                # the residual is odd in v; fix the sign of v so that it is non-positive
                if r > 0:
                    basis[:, j], r = -w, -r
                residuals.append(r)
        except EscapedNeighborhood:
            residuals = [np.nan] * basis.shape[1]
        det = float(np.linalg.det(bundle.X0))
        first_ok = rt.sigma_min <= rank_tol * (1.0 + np.linalg.norm(bundle.X0, 2)) or abs(det) <= det_tol
        member = bool(first_ok and any(abs(r) <= omega_tol for r in residuals))
        # sufficiency proxy: no sign change of det x_z(t, z) on (0, T]
        _, Xs, _ = bundle.samples
        dets = np.linalg.det(Xs[1:])
        proxy = bool(np.all(dets > 0) or np.all(dets < 0))
        return ConjugateCandidate(
            z=np.asarray(z, dtype=float), sigma_min=rt.sigma_min, v=basis[:, 0].copy(), omega_residual=residuals[0],
            y=arc.x0.copy(), det=det, refined=bool(refined and abs(det) <= det_tol), member=member,
            null_basis=basis, basis_residuals=tuple(residuals), no_earlier_conjugate=proxy,
        )

    return finish


def sweep_locus(problem: ProblemSpec, z_box, grid_per_axis, psi: Optional[TerminalCost] = None,
                opts: FlowOptions = DEFAULT_OPTIONS, rank_tol: float = RANK_TOL, det_tol: float = DET_TOL,
                omega_tol: float = OMEGA_TOL, workers: int = 1, second_method: str = "fd") -> LocusSweep:
    """Sample the conjugate locus on a tensor grid over ``z_box``.

    Every node is classified by ``det X(0)`` and ``sigma_min``.  Adjacent
    complete nodes with opposite determinant signs bracket a crossing that
    is refined by bisection along the connecting segment until
    ``|det X(0)| <= det_tol``; nodes whose smallest singular value is
    already below the rank threshold are emitted directly.  Nodes whose
    arc escapes are reported and segments touching them are skipped.

    Candidates are returned sorted lexicographically by ``z``, independent
    of ``workers``.
    """
    psi = psi or problem.terminal_cost
    axes, shape = _grid(z_box, grid_per_axis)
    if len(axes) != problem.n:
        raise ValueError(f"z_box must have {problem.n} rows")
    nodes = np.array(list(itertools.product(*axes)))
    results = parallel_map(_node_eval(problem, psi, opts), list(nodes), workers)
    idx = {tuple(i): k for k, i in enumerate(itertools.product(*[range(c) for c in shape]))}

    escaped = np.array([r is None for r in results])
    seeds: List[Tuple[np.ndarray, bool]] = []
    brackets = []
    skipped = 0
    for multi, k in idx.items():
        r = results[k]
        if r is None:
            continue
        det, smin, smax = r
        if smin <= rank_tol * (1.0 + smax):
            seeds.append((nodes[k], abs(det) <= det_tol))
        for axis in range(len(shape)):
            nb = list(multi)
            nb[axis] += 1
            if nb[axis] >= shape[axis]:
                continue
            j = idx[tuple(nb)]
            if results[j] is None:
                skipped += 1
                continue
            dj = results[j][0]
            if det * dj < 0:
                brackets.append((nodes[k], nodes[j], det))

    refine = lambda br: _bisect(problem, psi, opts, br[0], br[1], br[2], det_tol)  # noqa: E731
    for zm, _, ok in parallel_map(refine, brackets, workers):
        seeds.append((zm, ok))

    seeds.sort(key=lambda s: tuple(s[0]))
    unique: List[Tuple[np.ndarray, bool]] = []
    for z, ok in seeds:
        if unique and np.linalg.norm(z - unique[-1][0]) <= 1e-8 * (1.0 + np.linalg.norm(z)):
            continue
        unique.append((z, ok))

    finish = _finalize(problem, psi, opts, rank_tol, omega_tol, det_tol, second_method)
    candidates = parallel_map(finish, unique, workers)
    candidates.sort(key=lambda c: tuple(c.z))
    return LocusSweep(candidates, nodes[escaped], skipped, len(nodes), shape)


def gamma_psi_points(problem: ProblemSpec, candidates: Sequence[ConjugateCandidate],
                     reach_oracle: Callable, psi: Optional[TerminalCost] = None,
                     opts: FlowOptions = DEFAULT_OPTIONS, tie_tol: float = 1e-8) -> List[ConjugateCandidate]:
    """Keep the candidates whose extremal is globally optimal for its initial point.

    ``reach_oracle(y)`` must return a :class:`~pmpflow.optimality.ReachSolution`.
    Optimality is relative to the extremals the oracle discovers.
    """
    from .optimality import trajectory_cost

    kept = []
    for cand in candidates:
        sol = reach_oracle(cand.y)
        W = trajectory_cost(problem, cand.z, psi, opts).W
        if W <= sol.value + tie_tol:
            kept.append(cand)
    return kept


def write_locus_csv(path, candidates: Sequence[ConjugateCandidate], n: int, config_hash: Optional[str] = None):
    from .io import write_csv

    header = ([f"z{i + 1}" for i in range(n)] + ["sigma_min"] + [f"v{i + 1}" for i in range(n)]
              + ["omega_residual"] + [f"y{i + 1}" for i in range(n)])
    rows = [list(c.z) + [c.sigma_min] + list(c.v) + [c.omega_residual] + list(c.y) for c in candidates]
    write_csv(path, header, rows, config_hash)
