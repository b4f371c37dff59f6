"""Command-line front end: ``pmpflow <subcommand> [--config PATH] [--out DIR] [--seed N] [--threads N]``.

Exit codes: 0 success, 1 internal error, 2 configuration error,
3 escaped arc, 4 perturbation budget exhausted.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import compute_bounds
from .config import RunConfig, load_config, parse_box, parse_vector
from .conjugate import gamma_psi_points, sweep_locus, write_locus_csv
from .errors import BudgetExhausted, ConfigError, EscapedArc, EscapedNeighborhood, NoRootFound, PMPError
from .flow import export_arc, integrate_backward
from .io import write_csv, write_json
from .optimality import build_reach_sweep, multiplicity_clusters, reach, value_function, write_value_csv
from .perturbation import perturb_until_generic, transversality_rank

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_ESCAPE, EXIT_BUDGET = 0, 1, 2, 3, 4
RELATIVE = "relative to discovered extremal set"


def _summary(cfg: RunConfig, **extra) -> dict:
    out = {"version": __version__, "config_hash": cfg.hash(), "problem": cfg.label, "seed": cfg.seed,
           "tolerances": dict(cfg.tolerances), "flow": dict(cfg.flow)}
    out.update(extra)
    return out


def _outdir(cfg: RunConfig) -> Path:
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_solve(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    z = parse_vector(args.z if args.z is not None else cfg.grid["z"], problem.n)
    arc = integrate_backward(problem, z, opts=cfg.flow_options())
    out = _outdir(cfg)
    export_arc(arc, out / "arc.csv", out / "arc.json", cfg.hash())
    return EXIT_OK if arc.complete else EXIT_ESCAPE


def cmd_figure1(cfg: RunConfig, args) -> int:
    fig = cfg.figure1
    label = fig.get("label", "example21")
    if label != cfg.label:
        cfg = RunConfig(**{**cfg.__dict__, "label": label, "problem_params": {},
                           "terminal_family": None, "terminal_params": {}})
    problem = cfg.problem()
    lo, hi, step = float(fig["z_min"]), float(fig["z_max"]), float(fig["z_step"])
    if step <= 0 or hi < lo:
        raise ConfigError("figure1 needs z_step > 0 and z_max >= z_min")
    zs = np.linspace(lo, hi, int(round((hi - lo) / step)) + 1)
    out = _outdir(cfg) / "figure1"
    out.mkdir(exist_ok=True)
    rows = []
    opts = cfg.flow_options()
    for i, z in enumerate(zs):
        arc = integrate_backward(problem, [z], opts=opts)
        name = f"traj_{i:03d}.csv"
        export_arc(arc, out / name, None, cfg.hash())
        rows.append([i, float(z), arc.status, np.nan if arc.tau is None else arc.tau, float(arc.x_start[0]), name])
    write_csv(out / "index.csv", ["index", "z", "status", "tau", "x_start", "file"], rows, cfg.hash())
    return EXIT_OK


def _sweep_box(cfg, n):
    return parse_box(cfg.grid["sweep_box"] or "-4 4", n)


def cmd_conjugate(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    tol, opts = cfg.tolerances, cfg.flow_options()
    box = parse_box(cfg.grid["z_box"], problem.n)
    sw = sweep_locus(problem, box, int(cfg.grid["z_nodes"]), opts=opts, rank_tol=tol["rank_tol"],
                     det_tol=tol["det_tol"], omega_tol=tol["omega_tol"], workers=cfg.threads)
    out = _outdir(cfg)
    write_locus_csv(out / "locus.csv", sw.candidates, problem.n, cfg.hash())
    rs = build_reach_sweep(problem, _sweep_box(cfg, problem.n), int(cfg.grid["sweep_nodes"]), opts=opts,
                           workers=cfg.threads)

    def oracle(y):
        return reach(problem, y, rs, opts=opts, reach_tol=tol["reach_tol"], tie_tol=tol["tie_tol"], seed=cfg.seed)

    try:
        gamma = gamma_psi_points(problem, sw.candidates, oracle, opts=opts, tie_tol=tol["tie_tol"])
    except NoRootFound:
        gamma = []
    cands = [{"z": c.z, "sigma_min": c.sigma_min, "v": c.v, "omega_residual": c.omega_residual, "y": c.y,
              "refined": c.refined, "in_omega": c.member, "no_earlier_conjugate": c.no_earlier_conjugate}
             for c in sw.candidates]
    write_json(out / "conjugate.json", _summary(
        cfg, candidates=cands, n_candidates=len(cands), n_nodes=sw.n_nodes,
        escaped_nodes=sw.escaped_nodes, skipped_segments=sw.skipped_segments,
        gamma_psi=[c.z for c in gamma], gamma_psi_note=RELATIVE))
    return EXIT_OK


def cmd_reach(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    tol, opts = cfg.tolerances, cfg.flow_options()
    y = parse_vector(args.y if args.y is not None else cfg.grid["y"], problem.n)
    rs = build_reach_sweep(problem, _sweep_box(cfg, problem.n), int(cfg.grid["sweep_nodes"]), opts=opts,
                           workers=cfg.threads)
    sol = reach(problem, y, rs, opts=opts, reach_tol=tol["reach_tol"], tie_tol=tol["tie_tol"], seed=cfg.seed)
    out = _outdir(cfg)
    n = problem.n
    rows = [list(z) + [W, int(k < sol.multiplicity)] for k, (z, W) in enumerate(zip(sol.roots, sol.costs))]
    write_csv(out / "reach.csv", [f"z{i + 1}" for i in range(n)] + ["W", "minimizer"], rows, cfg.hash())
    write_json(out / "reach.json", _summary(cfg, y=y, value=sol.value, multiplicity=sol.multiplicity,
                                            multiple=sol.multiplicity > 1, n_roots=len(sol.costs), note=RELATIVE))
    return EXIT_OK


def cmd_value(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    tol, opts = cfg.tolerances, cfg.flow_options()
    n = problem.n
    ybox = parse_box(cfg.grid["y_box"], n)
    k = int(cfg.grid["y_nodes"])
    axes = [np.linspace(lo, hi, k) for lo, hi in ybox]
    ys = np.array(np.meshgrid(*axes, indexing="ij")).reshape(n, -1).T
    rs = build_reach_sweep(problem, _sweep_box(cfg, n), int(cfg.grid["sweep_nodes"]), opts=opts,
                           workers=cfg.threads)
    table = value_function(problem, ys, rs, opts=opts, workers=cfg.threads, reach_tol=tol["reach_tol"],
                           tie_tol=tol["tie_tol"], seed=cfg.seed)
    out = _outdir(cfg)
    write_value_csv(out / "value.csv", out / "vpsi.csv", table, cfg.hash())
    ok = ~table.failed
    extrema = {}
    if ok.any():
        vals = np.where(ok, table.values, np.nan)
        lo, hi = int(np.nanargmin(vals)), int(np.nanargmax(vals))
        extrema = {"V_min": table.values[lo], "y_at_V_min": table.y[lo], "V_max": table.values[hi],
                   "y_at_V_max": table.y[hi]}
    clusters = multiplicity_clusters(table)
    write_json(out / "value.json", _summary(cfg, n_nodes=len(ys), failed=int(table.failed.sum()),
                                            multiple_nodes=int(table.non_differentiable.sum()),
                                            n_clusters=len(clusters), clusters=clusters, note=RELATIVE, **extrema))
    return EXIT_OK


def cmd_bounds(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    r = float(args.radius if args.radius is not None else cfg.grid["radius"])
    report = compute_bounds(problem, r)
    write_json(_outdir(cfg) / "bounds.json", _summary(cfg, **report.as_dict()))
    return EXIT_OK


def cmd_perturb(cfg: RunConfig, args) -> int:
    problem = cfg.problem()
    tol, opts, pt = cfg.tolerances, cfg.flow_options(), cfg.perturb
    box = parse_box(cfg.grid["z_box"], problem.n)
    out = _outdir(cfg)
    budget = float(pt["c4_budget"]) if pt.get("c4_budget") else None
    try:
        res = perturb_until_generic(problem, box, int(pt["grid"]), max_draws=int(pt["max_draws"]),
                                    scale=float(pt["scale"]), seed=cfg.seed, r_in=float(pt["r_in"]),
                                    r_out=float(pt["r_out"]), c4_budget=budget, opts=opts,
                                    rank_tol=tol["rank_tol"], omega_tol=tol["omega_tol"], workers=cfg.threads)
    except BudgetExhausted as exc:
        write_json(out / "transversality.json", _summary(cfg, success=False, diagnostics=exc.diagnostics))
        raise
    ranks = []
    for c in res.sweep.candidates:
        try:
            rep = transversality_rank(problem, c.z, c.v, res.cost, workers=cfg.threads)
            ranks.append({"z": c.z, "v": c.v, **rep.as_dict()})
        except EscapedNeighborhood:
            ranks.append({"z": c.z, "v": c.v, "rank": None, "note": "escaped neighborhood"})
    write_json(out / "transversality.json", _summary(
        cfg, success=True, draws=res.draws, theta=res.theta, centers=res.cost.centers, c4_norm=res.c4_norm,
        scale=float(pt["scale"]), candidates=ranks))
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "figure1": cmd_figure1,
    "conjugate": cmd_conjugate,
    "reach": cmd_reach,
    "value": cmd_value,
    "bounds": cmd_bounds,
    "perturb": cmd_perturb,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmpflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "solve":
            p.add_argument("--z", help="terminal point, overrides [grid] z")
        if name == "reach":
            p.add_argument("--y", help="initial point, overrides [grid] y")
        if name == "bounds":
            p.add_argument("--radius", type=float)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    for name in ("z", "y", "radius"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            cfg.threads = args.threads
        cfg.validate()
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BudgetExhausted as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (EscapedArc, EscapedNeighborhood) as exc:
        print(f"escaped: {exc}", file=sys.stderr)
        return EXIT_ESCAPE
    except PMPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("PMPFLOW_DEBUG"):
            raise
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
