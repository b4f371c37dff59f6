import json

import numpy as np
import pytest

from pmpflow.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_ESCAPE, EXIT_OK, main
from pmpflow.config import load_config, parse_box, parse_vector
from pmpflow.errors import ConfigError
from pmpflow.io import read_csv

COS = """
[problem]
label = single_integrator_cos

[grid]
z_box = -2 2
z_nodes = 81
y_box = -1 1
y_nodes = 11
sweep_box = -4 4
sweep_nodes = 81
"""

ZERO = """
[problem]
label = single_integrator

[grid]
y_box = -1 1
y_nodes = 5
sweep_box = -3 3
sweep_nodes = 31
"""

DEGENERATE = """
[problem]
label = single_integrator_quad
a = -0.5

[grid]
z_box = -1 1

[perturb]
grid = 11
max_draws = 2
scale = 0
"""


@pytest.fixture
def ini(tmp_path):
    def write(text, name="run.ini"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def run(*args):
    return main([str(a) for a in args])


def test_solve_complete_and_escaped(tmp_path, ini):
    cfg = ini(COS)
    assert run("solve", "--config", cfg, "--out", tmp_path / "a", "--z", "1") == EXIT_OK
    meta = json.loads((tmp_path / "a" / "arc.json").read_text())
    assert meta["x_start"][0] == pytest.approx(1 - 2 * np.sin(1.0), abs=1e-7)
    e21 = ini("[problem]\nlabel = example21\n", "e21.ini")
    assert run("solve", "--config", e21, "--out", tmp_path / "b", "--z", "-1") == EXIT_ESCAPE
    assert json.loads((tmp_path / "b" / "arc.json").read_text())["status"] == "escaped"


def test_figure1_index(tmp_path):
    assert run("figure1", "--out", tmp_path) == EXIT_OK
    header, rows = read_csv(tmp_path / "figure1" / "index.csv")
    assert len(rows) == 17
    assert {r[header.index("status")] for r in rows} == {"complete", "escaped"}
    assert len(list((tmp_path / "figure1").glob("traj_*.csv"))) == 17


def test_conjugate_finds_two_candidates(tmp_path, ini):
    assert run("conjugate", "--config", ini(COS), "--out", tmp_path) == EXIT_OK
    info = json.loads((tmp_path / "conjugate.json").read_text())
    assert info["candidates"][0]["no_earlier_conjugate"] in (True, False)
    assert info["n_candidates"] == 2
    np.testing.assert_allclose([c["z"][0] for c in info["candidates"]], [-np.pi / 3, np.pi / 3], atol=1e-7)
    assert "relative to discovered extremal set" in info["gamma_psi_note"]
    _, rows = read_csv(tmp_path / "locus.csv")
    assert len(rows) == 2


def test_reach_multiplicity(tmp_path, ini):
    assert run("reach", "--config", ini(COS), "--out", tmp_path, "--y", "0") == EXIT_OK
    info = json.loads((tmp_path / "reach.json").read_text())
    assert info["multiplicity"] == 2 and info["multiple"]


def test_value_zero_cost(tmp_path, ini):
    assert run("value", "--config", ini(ZERO), "--out", tmp_path) == EXIT_OK
    header, rows = read_csv(tmp_path / "value.csv")
    assert header == ["y1", "V", "mult", "count_roots"]
    np.testing.assert_allclose([float(r[1]) for r in rows], 0.0, atol=1e-12)
    info = json.loads((tmp_path / "value.json").read_text())
    assert info["V_min"] == info["V_max"] == 0.0 and info["n_clusters"] == 0


def test_bounds_json(tmp_path, ini):
    assert run("bounds", "--config", ini(ZERO), "--out", tmp_path, "--radius", "2") == EXIT_OK
    info = json.loads((tmp_path / "bounds.json").read_text())
    assert info["r"] == 2.0 and info["beta1"] == pytest.approx(2.0)


def test_perturb_budget_exit(tmp_path, ini):
    assert run("perturb", "--config", ini(DEGENERATE), "--out", tmp_path) == EXIT_BUDGET
    info = json.loads((tmp_path / "transversality.json").read_text())
    assert info["success"] is False and len(info["diagnostics"]["draws"]) == 2


def test_config_errors(tmp_path, ini, monkeypatch):
    assert run("solve", "--config", tmp_path / "missing.ini") == EXIT_CONFIG
    assert run("solve", "--config", ini("[problem]\nlabel = nope\n")) == EXIT_CONFIG
    assert run("nonsense") == EXIT_CONFIG
    monkeypatch.setenv("PMPFLOW_RANK_TOL", "-1")
    assert run("solve", "--config", ini(COS), "--out", tmp_path) == EXIT_CONFIG


def test_env_override(ini):
    cfg = load_config(ini(COS), environ={"PMPFLOW_RANK_TOL": "1e-6", "PMPFLOW_RTOL": "1e-7"})
    assert cfg.tolerances["rank_tol"] == 1e-6
    assert cfg.flow_options().rtol == 1e-7
    assert cfg.hash() != load_config(ini(COS), environ={}).hash()


def test_hash_ignores_threads_and_out(ini):
    a = load_config(ini(COS), environ={})
    b = load_config(ini(COS), environ={})
    b.threads, b.out = 4, "elsewhere"
    assert a.hash() == b.hash()


def test_outputs_carry_config_hash(tmp_path, ini):
    cfg = ini(COS)
    run("reach", "--config", cfg, "--out", tmp_path, "--y", "0.3")
    digest = load_config(cfg, environ={}).hash()
    assert (tmp_path / "reach.csv").read_text().startswith(f"# config_hash={digest}")
    assert json.loads((tmp_path / "reach.json").read_text())["config_hash"] == digest


def test_threads_do_not_change_bytes(tmp_path, ini):
    cfg = ini(COS)
    for t in (1, 2):
        assert run("value", "--config", cfg, "--out", tmp_path / str(t), "--threads", t) == EXIT_OK
        assert run("conjugate", "--config", cfg, "--out", tmp_path / str(t), "--threads", t) == EXIT_OK
    for name in ("value.csv", "vpsi.csv", "locus.csv"):
        assert (tmp_path / "1" / name).read_bytes() == (tmp_path / "2" / name).read_bytes()


def test_parse_helpers():
    np.testing.assert_array_equal(parse_box("-1 1", 2), [[-1, 1], [-1, 1]])
    np.testing.assert_array_equal(parse_box("-1 1; 0 2", 2), [[-1, 1], [0, 2]])
    np.testing.assert_array_equal(parse_vector("1, 2", 2), [1, 2])
    with pytest.raises(ConfigError):
        parse_box("2 1", 1)
    with pytest.raises(ConfigError):
        parse_vector("1", 2)


def test_inline_comments_and_multi_axis_boxes(ini):
    cfg = load_config(ini("[problem]\nlabel = planar_lq  # two states\n[grid]\nz_box = -1 1; 0 2  # per axis\n"),
                      environ={})
    assert cfg.label == "planar_lq"
    np.testing.assert_array_equal(parse_box(cfg.grid["z_box"], 2), [[-1, 1], [0, 2]])
