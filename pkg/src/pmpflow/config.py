"""Run configuration: INI file plus ``PMPFLOW_*`` environment overrides.

Example::

    [problem]
    label = single_integrator_cos
    T = 2

    [terminal]
    family = cos
    amplitude = 1.0

    [flow]
    rtol = 1e-9

    [grid]
    z_box = -2 2
    z_nodes = 401

    [tolerances]
    rank_tol = 1e-8

Boxes are written as ``lo hi`` pairs separated by ``;`` for several axes;
inline comments start with ``#``.
Keys of ``[flow]`` and ``[tolerances]`` can be overridden with environment
variables named ``PMPFLOW_<KEY>`` (for example ``PMPFLOW_RANK_TOL``).
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from .catalog import LABELS, make_problem
from .errors import ConfigError
from .flow import FlowOptions
from .problem import ProblemSpec

ENV_PREFIX = "PMPFLOW_"

DEFAULT_TOLERANCES = {
    "rank_tol": 1e-8,
    "det_tol": 1e-10,
    "omega_tol": 1e-6,
    "reach_tol": 1e-9,
    "tie_tol": 1e-8,
}

DEFAULT_GRID = {
    "z_box": "-2 2",
    "z_nodes": "401",
    "y_box": "-3 3",
    "y_nodes": "241",
    "sweep_box": "",
    "sweep_nodes": "401",
    "z": "0",
    "y": "0",
    "radius": "1",
}

DEFAULT_PERTURB = {"max_draws": "10", "scale": "0.05", "r_in": "1", "r_out": "2", "grid": "101", "c4_budget": ""}

DEFAULT_FIGURE1 = {"z_min": "-2", "z_max": "2", "z_step": "0.25"}


def _value(text: str):
    """Parse a scalar or whitespace-separated vector; fall back to the raw string."""
    text = text.strip()
    try:
        parts = [float(t) for t in text.replace(",", " ").split()]
    except ValueError:
        return text
    if len(parts) == 1:
        v = parts[0]
        return int(v) if v.is_integer() and "." not in text and "e" not in text.lower() else v
    return parts


def parse_box(text: str, n: int) -> np.ndarray:
    rows = [r for r in str(text).split(";") if r.strip()]
    try:
        box = np.array([[float(t) for t in r.replace(",", " ").split()] for r in rows])
    except ValueError:
        raise ConfigError(f"cannot parse box {text!r}") from None
    if box.shape == (1, 2) and n > 1:
        box = np.repeat(box, n, axis=0)
    if box.shape != (n, 2) or np.any(box[:, 1] < box[:, 0]):
        raise ConfigError(f"box {text!r} must give {n} 'lo hi' pairs")
    return box


def parse_vector(text: str, n: int) -> np.ndarray:
    try:
        v = np.array([float(t) for t in str(text).replace(",", " ").split()])
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}") from None
    if v.size != n:
        raise ConfigError(f"vector {text!r} must have {n} entries")
    return v


@dataclass
class RunConfig:
    label: str
    problem_params: Dict[str, object] = field(default_factory=dict)
    terminal_family: Optional[str] = None
    terminal_params: Dict[str, object] = field(default_factory=dict)
    flow: Dict[str, float] = field(default_factory=dict)
    grid: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_GRID))
    tolerances: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    perturb: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PERTURB))
    figure1: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_FIGURE1))
    seed: int = 0
    threads: int = 1
    out: str = "out"

    def problem(self) -> ProblemSpec:
        return make_problem(self.label, self.problem_params, self.terminal_family, self.terminal_params)

    def flow_options(self) -> FlowOptions:
        try:
            return FlowOptions(**self.flow)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad [flow] section: {exc}") from None

    def hash(self) -> str:
        """Digest of everything that can change results (``threads`` and ``out`` excluded)."""
        payload = asdict(self)
        payload.pop("threads")
        payload.pop("out")
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ConfigError(f"unknown problem label {self.label!r}")
        for k, v in self.tolerances.items():
            if not v > 0:
                raise ConfigError(f"tolerance {k} must be positive")
        for k in ("z_nodes", "y_nodes", "sweep_nodes"):
            if int(float(self.grid[k])) < 2:
                raise ConfigError(f"{k} must be at least 2")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


def load_config(path: Optional[str] = None, environ=None) -> RunConfig:
    """Read an INI file (or defaults when ``path`` is None) and apply env overrides."""
    environ = os.environ if environ is None else environ
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    sec = lambda name: dict(cp[name]) if cp.has_section(name) else {}  # noqa: E731

    problem = sec("problem")
    label = problem.pop("label", "single_integrator_cos")
    params = {k: _value(v) for k, v in problem.items()}
    terminal = sec("terminal")
    family = terminal.pop("family", None)
    tparams = {k: _value(v) for k, v in terminal.items()}
    flow = {k: float(v) for k, v in sec("flow").items()}
    if "n_samples" in flow:
        flow["n_samples"] = int(flow["n_samples"])
    tol = dict(DEFAULT_TOLERANCES)
    tol.update({k: float(v) for k, v in sec("tolerances").items()})
    grid = dict(DEFAULT_GRID)
    grid.update(sec("grid"))
    perturb = dict(DEFAULT_PERTURB)
    perturb.update(sec("perturb"))
    fig = dict(DEFAULT_FIGURE1)
    fig.update(sec("figure1"))
    run = sec("run")
    try:
        for key in list(tol) + ["rtol", "atol", "max_step", "escape_radius"]:
            env = environ.get(ENV_PREFIX + key.upper())
            if env is not None:
                (tol if key in tol else flow)[key] = float(env)
        cfg = RunConfig(label, params, family, tparams, flow, grid, tol, perturb, fig,
                        seed=int(run.get("seed", 0)), threads=int(run.get("threads", 1)), out=run.get("out", "out"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg
