"""
Trajectory cost, reachability and the value function.

The cost of the extremal ending at ``z`` is

    W(z) = int_0^T L(x, u*) dt + psi(z).

For an initial point ``y`` every terminal point with ``x(0, z) = y`` is a
candidate; ``V(y)`` is the smallest ``W`` among the candidates found.  The
search is seeded from a precomputed sweep of ``z -> x(0, z)`` and refined
by damped Newton, so "global" always means global over the discovered
extremals.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ._parallel import parallel_map
from .errors import EscapedArc, NoRootFound
from .flow import (
    DEFAULT_OPTIONS,
    ExtremalArc,
    FlowOptions,
    integrate_backward,
    integrate_variational,
    running_cost_integral,
)
from .problem import ProblemSpec, TerminalCost

__all__ = [
    "ExtremalRecord",
    "ReachSweep",
    "ReachSolution",
    "ValueTable",
    "PairResidual",
    "trajectory_cost",
    "cost_gradient",
    "build_reach_sweep",
    "reach",
    "value_function",
    "pair_residual",
    "write_value_csv",
    "multiplicity_clusters",
]

REACH_TOL = 1e-9
TIE_TOL = 1e-8


@dataclass(frozen=True)
class ExtremalRecord:
    """Terminal point, initial point and cost of one extremal.

    ``W`` is ``+inf`` for an escaped arc.  ``arc`` is dropped when records
    travel between processes.
    """

    z: np.ndarray
    y: np.ndarray
    W: float
    status: str
    arc: Optional[ExtremalArc] = field(default=None, repr=False, compare=False)

    def __getstate__(self):
        state = dict(self.__dict__)
        state["arc"] = None
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


def trajectory_cost(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
                    opts: FlowOptions = DEFAULT_OPTIONS) -> ExtremalRecord:
    psi = psi or problem.terminal_cost
    arc = integrate_backward(problem, z, psi, opts)
    if not arc.complete:
        return ExtremalRecord(arc.z, arc.x_start, np.inf, arc.status, arc)
    W = running_cost_integral(arc) + float(psi.value(arc.z))
    return ExtremalRecord(arc.z.copy(), arc.x0.copy(), W, arc.status, arc)


def cost_gradient(problem: ProblemSpec, z, psi: Optional[TerminalCost] = None,
                  opts: FlowOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """``grad W(z) = X(0)^T p(0)``, the adjoint form of the cost derivative."""
    arc, bundle = integrate_variational(problem, z, psi, opts)
    return bundle.X0.T @ arc.p0


@dataclass(frozen=True)
class ReachSweep:
    """Images ``x(0, z)`` of a tensor grid of terminal points.

    ``image_lo`` and ``image_hi`` bound, coordinate by coordinate, the
    images of each node and its grid neighbours.  A node seeds Newton for
    ``y`` when ``y`` falls inside that box, widened by ``SEED_MARGIN`` of
    its size to allow for curvature between nodes.  Escaped nodes carry
    ``nan`` images.
    """

    nodes: np.ndarray
    images: np.ndarray
    image_lo: np.ndarray
    image_hi: np.ndarray
    shape: Tuple[int, ...]
    spacing: np.ndarray
    box: np.ndarray

    @property
    def complete(self) -> np.ndarray:
        return np.all(np.isfinite(self.images), axis=1)


SEED_MARGIN = 0.25
COARSE_RTOL = 1e-6


def build_reach_sweep(problem: ProblemSpec, z_box, nodes_per_axis, psi: Optional[TerminalCost] = None,
                      opts: FlowOptions = DEFAULT_OPTIONS, workers: int = 1) -> ReachSweep:
    psi = psi or problem.terminal_cost
    box = np.atleast_2d(np.asarray(z_box, dtype=float))
    n = problem.n
    if box.shape != (n, 2):
        raise ValueError(f"z_box must have shape ({n}, 2)")
    counts = tuple(int(c) for c in np.broadcast_to(np.asarray(nodes_per_axis, dtype=int), (n,)))
    axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(box, counts)]
    nodes = np.array(list(itertools.product(*axes)))

    def image(z):
        arc = integrate_backward(problem, z, psi, opts, dense=False)
        return arc.x0.copy() if arc.complete else np.full(n, np.nan)

    images = np.array(parallel_map(image, list(nodes), workers))
    grid = images.reshape(counts + (n,))
    lo, hi = grid.copy(), grid.copy()
    with np.errstate(invalid="ignore"):
        for axis in range(n):
            for shift in (1, -1):
                pad = [(0, 0)] * (n + 1)
                pad[axis] = (1, 1)
                padded = np.pad(grid, pad, constant_values=np.nan)
                nb = np.take(padded, np.arange(counts[axis]) + 1 + shift, axis=axis)
                lo = np.fmin(lo, nb)
                hi = np.fmax(hi, nb)
    lo[~np.isfinite(grid)] = np.nan
    hi[~np.isfinite(grid)] = np.nan
    spacing = np.array([(b - a) / (c - 1) for (a, b), c in zip(box, counts)])
    return ReachSweep(nodes, images, lo.reshape(-1, n), hi.reshape(-1, n), counts, spacing, box)


@dataclass(frozen=True)
class ReachSolution:
    """All discovered terminal points reaching ``y``, sorted by cost.

    ``value`` is ``V(y)`` relative to the discovered set and
    ``multiplicity`` counts the roots within ``tie_tol`` of it.
    """

    y: np.ndarray
    roots: np.ndarray
    costs: np.ndarray
    value: float
    multiplicity: int
    records: Tuple[ExtremalRecord, ...] = field(repr=False, default=())

    @property
    def minimizers(self) -> np.ndarray:
        return self.roots[: self.multiplicity]


def _newton(problem, psi, opts, y, z0, reach_tol, radius, known=(), max_iter=30, refresh=3, halvings=6,
            window=5, capture=1e-5):
    """Damped Newton on ``x(0, z) = y`` with a Jacobian reused for ``refresh`` steps.

    Gives up when an arc escapes at a Jacobian refresh, when the line search
    fails with a fresh Jacobian, or when the residual has not halved over
    ``window`` iterations.  Also stops (returning None) once an iterate comes
    within ``capture (1 + |r|)`` of a root ``r`` in ``known``.
    """
    z = np.array(z0, dtype=float)
    J = None
    age = refresh
    F = None
    history: List[float] = []
    for _ in range(max_iter):
        if J is None or age >= refresh:
            try:
                arc, bundle = integrate_variational(problem, z, psi, opts)
            except EscapedArc:
                return None
            J, age = bundle.X0, 0
            F = arc.x0 - y
        nF = float(np.linalg.norm(F))
        if nF <= reach_tol:
            return z
        history.append(nF)
        if len(history) > window and nF > 0.5 * history[-1 - window]:
            return None
        dz = np.linalg.lstsq(J, -F, rcond=None)[0]
        lam, accepted = 1.0, False
        for _ in range(halvings):
            trial = z + lam * dz
            arc = integrate_backward(problem, trial, psi, opts, dense=False)
            if arc.complete:
                Ft = arc.x0 - y
                if np.linalg.norm(Ft) <= (1.0 - 1e-4 * lam) * nF:
                    z, F, accepted = trial, Ft, True
                    break
            lam *= 0.5
        if not accepted:
            if age == 0:
                return None
            age = refresh
            continue
        age += 1
        if np.linalg.norm(z) > radius:
            return None
        if any(np.linalg.norm(z - r) <= capture * (1.0 + np.linalg.norm(r)) for r in known):
            return None
    return z if F is not None and np.linalg.norm(F) <= reach_tol else None


def _seeds(sweep: ReachSweep, y, n_random, rng) -> List[np.ndarray]:
    lo, hi = sweep.image_lo, sweep.image_hi
    margin = SEED_MARGIN * (hi - lo) + 1e-12
    with np.errstate(invalid="ignore"):
        inside = np.all((lo - margin <= y) & (y <= hi + margin), axis=1)
    near = np.flatnonzero(inside & sweep.complete)
    dist = np.linalg.norm(sweep.images[near] - y, axis=1)
    near = near[np.argsort(dist, kind="stable")]
    chosen: List[np.ndarray] = []
    for k in near:
        z = sweep.nodes[k]
        if all(np.any(np.abs(z - c) > 2.0 * sweep.spacing + 1e-15) for c in chosen):
            chosen.append(z)
    a, b = sweep.box[:, 0], sweep.box[:, 1]
    for i in range(n_random):
        if chosen:
            base = chosen[i % len(chosen)]
            chosen.append(base + rng.normal(scale=sweep.spacing))
        else:
            chosen.append(a + (b - a) * rng.random(len(a)))
    return chosen


def reach(problem: ProblemSpec, y, sweep: ReachSweep, psi: Optional[TerminalCost] = None,
          opts: FlowOptions = DEFAULT_OPTIONS, reach_tol: float = REACH_TOL, tie_tol: float = TIE_TOL,
          n_random: int = 4, seed: int = 0) -> ReachSolution:
    """Solve ``x(0, z) = y`` from every seed and rank the roots by ``W``.

    Seeds are grid nodes whose neighbourhood image box contains ``y``
    (thinned so that kept seeds are more than two grid spacings apart,
    nearest image first) plus ``n_random`` perturbations drawn from a generator keyed by
    ``seed`` and the bytes of ``y``.  Roots closer than
    ``1e-6 (1 + |z|)`` are merged.  Raises :class:`NoRootFound` when no
    seed converges.
    """
    psi = psi or problem.terminal_cost
    y = np.asarray(y, dtype=float).reshape(problem.n)
    key = np.frombuffer(np.ascontiguousarray(y).tobytes(), dtype=np.uint32)
    rng = np.random.default_rng([int(seed)] + [int(k) for k in key])
    radius = 2.0 * np.max(np.abs(sweep.box)) + 1.0
    # cheap pass to locate roots, then polish at the requested tolerances
    coarse = replace(opts, rtol=max(opts.rtol, COARSE_RTOL), atol=max(opts.atol, 1e-3 * COARSE_RTOL))
    coarse_tol = max(reach_tol, 10 * COARSE_RTOL * (1.0 + float(np.linalg.norm(y))))
    roots: List[np.ndarray] = []
    for z0 in _seeds(sweep, y, n_random, rng):
        if any(np.linalg.norm(z0 - r) <= 1e-6 * (1.0 + np.linalg.norm(r)) for r in roots):
            continue
        z = _newton(problem, psi, coarse, y, z0, coarse_tol, radius, roots)
        if z is None:
            continue
        z = _newton(problem, psi, opts, y, z, reach_tol, radius)
        if z is None:
            continue
        if any(np.linalg.norm(z - r) <= 1e-6 * (1.0 + np.linalg.norm(r)) for r in roots):
            continue
        roots.append(z)
    if not roots:
        raise NoRootFound(f"no terminal point reaches y={y}")
    records = [trajectory_cost(problem, z, psi, opts) for z in roots]
    order = sorted(range(len(records)), key=lambda i: (records[i].W, tuple(records[i].z)))
    records = [records[i] for i in order]
    costs = np.array([r.W for r in records])
    V = float(costs[0])
    mult = int(np.sum(costs <= V + tie_tol))
    return ReachSolution(y, np.array([r.z for r in records]), costs, V, mult, tuple(records))


@dataclass(frozen=True)
class ValueTable:
    """``V`` on a grid of initial points.

    Rows whose reach problem had no solution are listed in ``failed`` and
    carry ``nan``.  ``non_differentiable`` marks multiplicity above one,
    i.e. sample points of the discovered ``V_psi`` set.
    """

    y: np.ndarray
    values: np.ndarray
    multiplicity: np.ndarray
    minimizers: List[np.ndarray]
    failed: np.ndarray
    count_roots: Optional[np.ndarray] = None

    @property
    def non_differentiable(self) -> np.ndarray:
        return self.multiplicity > 1


def value_function(problem: ProblemSpec, y_grid, sweep: ReachSweep, psi: Optional[TerminalCost] = None,
                   opts: FlowOptions = DEFAULT_OPTIONS, workers: int = 1, reach_tol: float = REACH_TOL,
                   tie_tol: float = TIE_TOL, n_random: int = 4, seed: int = 0) -> ValueTable:
    ys = np.atleast_2d(np.asarray(y_grid, dtype=float))
    if ys.shape[1] != problem.n and ys.shape[0] == problem.n:
        ys = ys.T

    def solve(y):
        try:
            sol = reach(problem, y, sweep, psi, opts, reach_tol, tie_tol, n_random, seed)
        except NoRootFound:
            return None
        return sol.value, sol.multiplicity, sol.minimizers, len(sol.costs)

    out = parallel_map(solve, list(ys), workers)
    failed = np.array([o is None for o in out])
    values = np.array([np.nan if o is None else o[0] for o in out])
    mult = np.array([0 if o is None else o[1] for o in out], dtype=int)
    mins = [np.empty((0, problem.n)) if o is None else o[2] for o in out]
    counts = np.array([0 if o is None else o[3] for o in out], dtype=int)
    return ValueTable(ys, values, mult, mins, failed, counts)


def multiplicity_clusters(table: ValueTable) -> List[dict]:
    """Group the nodes with several minimizers into clusters of neighbouring nodes.

    Two flagged nodes are neighbours when they are at most 1.5 grid
    spacings apart (the smallest positive coordinate gap).  Clusters are
    ordered by their first node.
    """
    flagged = np.flatnonzero(table.non_differentiable)
    if flagged.size == 0:
        return []
    gaps = [np.diff(np.unique(col)) for col in table.y.T]
    gaps = np.concatenate([g[g > 0] for g in gaps])
    link = 1.5 * (gaps.min() if gaps.size else 1.0)
    pts = table.y[flagged]
    label = -np.ones(len(flagged), dtype=int)
    clusters = []
    for i in range(len(flagged)):
        if label[i] >= 0:
            continue
        label[i] = len(clusters)
        stack, members = [i], []
        while stack:
            j = stack.pop()
            members.append(j)
            near = np.flatnonzero((label < 0) & (np.linalg.norm(pts - pts[j], axis=1) <= link))
            label[near] = label[i]
            stack.extend(near.tolist())
        idx = flagged[sorted(members)]
        clusters.append({"nodes": len(idx), "y_min": table.y[idx].min(axis=0), "y_max": table.y[idx].max(axis=0),
                         "V_min": float(np.min(table.values[idx])), "V_max": float(np.max(table.values[idx])),
                         "max_multiplicity": int(table.multiplicity[idx].max())})
    return clusters


def write_value_csv(value_path, vpsi_path, table: ValueTable, config_hash: Optional[str] = None) -> None:
    """``value.csv`` holds every row; ``vpsi.csv`` the rows with several minimizers.

    ``mult`` is the number of minimizers and ``count_roots`` the number of
    distinct extremals found for that node.
    """
    from .io import write_csv

    n = table.y.shape[1]
    ycols = [f"y{i + 1}" for i in range(n)]
    counts = table.count_roots if table.count_roots is not None else table.multiplicity
    rows = [list(y) + [V, int(m), int(c)] for y, V, m, c in zip(table.y, table.values, table.multiplicity, counts)]
    write_csv(value_path, ycols + ["V", "mult", "count_roots"], rows, config_hash)
    vrows = []
    for y, V, m, zs in zip(table.y, table.values, table.multiplicity, table.minimizers):
        if m > 1:
            for z in zs:
                vrows.append(list(y) + [V] + list(z))
    write_csv(vpsi_path, ycols + ["V"] + [f"z{i + 1}" for i in range(n)], vrows, config_hash)


@dataclass(frozen=True)
class PairResidual:
    """``Phi(z1, z2) = (x(0, z1) - x(0, z2), W(z1) - W(z2))`` and the rank of its Jacobian."""

    phi: np.ndarray
    jacobian: np.ndarray
    singular_values: np.ndarray
    rank: int


def pair_residual(problem: ProblemSpec, z1, z2, psi: Optional[TerminalCost] = None,
                  opts: FlowOptions = DEFAULT_OPTIONS, rank_rtol: float = 1e-8) -> PairResidual:
    """Evaluate the pair map and its ``(n+1) x 2n`` Jacobian.

    The cost rows use ``grad W = X(0)^T p(0)``; rank is counted with
    threshold ``rank_rtol * sigma_max``.
    """
    psi = psi or problem.terminal_cost
    parts = []
    for z in (z1, z2):
        arc, bundle = integrate_variational(problem, z, psi, opts)
        W = running_cost_integral(arc) + float(psi.value(arc.z))
        parts.append((arc.x0, W, bundle.X0, bundle.X0.T @ arc.p0))
    (y1, W1, X1, g1), (y2, W2, X2, g2) = parts
    phi = np.append(y1 - y2, W1 - W2)
    jac = np.block([[X1, -X2], [g1[None, :], -g2[None, :]]])
    s = np.linalg.svd(jac, compute_uv=False)
    rank = int(np.sum(s > rank_rtol * s[0])) if s[0] > 0 else 0
    return PairResidual(phi, jac, s, rank)
