import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from pmpflow.bounds import compute_bounds
from pmpflow.catalog import make_problem
from pmpflow.errors import NoRootFound
from pmpflow.io import read_csv
from pmpflow.optimality import (
    ValueTable,
    build_reach_sweep,
    pair_residual,
    reach,
    trajectory_cost,
    value_function,
    multiplicity_clusters,
    write_value_csv,
)

Z1 = brentq(lambda z: z - 2.0 * np.sin(z), 1.0, 3.0, xtol=1e-15)


@pytest.fixture(scope="module")
def cos_sweep():
    return build_reach_sweep(make_problem("single_integrator_cos"), [[-4.0, 4.0]], 161)


@pytest.fixture(scope="module")
def cos_table(cos_sweep):
    ys = np.linspace(-1.0, 1.0, 21)[:, None]
    return value_function(make_problem("single_integrator_cos"), ys, cos_sweep)


def test_sweep_shapes(cos_sweep):
    assert cos_sweep.images.shape == (161, 1)
    assert cos_sweep.complete.all()
    assert np.all(cos_sweep.image_lo <= cos_sweep.images) and np.all(cos_sweep.images <= cos_sweep.image_hi)


def test_reach_finds_symmetric_minimizers(cos_sweep):
    sol = reach(make_problem("single_integrator_cos"), [0.0], cos_sweep)
    np.testing.assert_allclose(sol.roots[:, 0], [-Z1, Z1, 0.0], atol=1e-8)
    assert sol.multiplicity == 2
    assert sol.value == pytest.approx(np.sin(Z1) ** 2 + np.cos(Z1), abs=1e-9)
    np.testing.assert_allclose(sorted(sol.minimizers[:, 0]), [-Z1, Z1], atol=1e-8)


def test_reach_is_deterministic(cos_sweep):
    problem = make_problem("single_integrator_cos")
    a = reach(problem, [0.37], cos_sweep, seed=3)
    b = reach(problem, [0.37], cos_sweep, seed=3)
    np.testing.assert_array_equal(a.roots, b.roots)


def test_reach_without_roots_raises():
    problem = make_problem("example21")
    sweep = build_reach_sweep(problem, [[-4.0, -2.6]], 15)
    with pytest.raises(NoRootFound):
        reach(problem, [50.0], sweep)


def test_value_is_lipschitz_with_gamma(cos_table):
    # |V(y) - V(y')| <= max |p(0)| |y - y'| and |p(0)| = |sin z| <= 1 <= gamma
    assert not cos_table.failed.any()
    slopes = np.abs(np.diff(cos_table.values)) / np.diff(cos_table.y[:, 0])
    gamma = compute_bounds(make_problem("single_integrator_cos"), 1.0).gamma
    assert slopes.max() <= 1.0 + 1e-9
    assert gamma >= 1.0


def test_value_symmetric_and_kink_at_origin(cos_table):
    np.testing.assert_allclose(cos_table.values, cos_table.values[::-1], atol=1e-9)
    np.testing.assert_array_equal(np.flatnonzero(cos_table.non_differentiable), [10])


def test_single_cluster_at_origin(cos_table):
    clusters = multiplicity_clusters(cos_table)
    assert len(clusters) == 1
    assert clusters[0]["nodes"] == 1 and clusters[0]["y_min"][0] == pytest.approx(0.0, abs=1e-12)


def test_clusters_link_neighbours():
    y = np.linspace(0, 1, 11)[:, None]
    mult = np.ones(11, dtype=int)
    mult[[2, 3, 7]] = 2
    table = ValueTable(y, np.zeros(11), mult, [np.empty((0, 1))] * 11, np.zeros(11, bool))
    assert [c["nodes"] for c in multiplicity_clusters(table)] == [2, 1]


def test_zero_terminal_cost_gives_zero_value():
    problem = make_problem("single_integrator")
    sweep = build_reach_sweep(problem, [[-3.0, 3.0]], 31)
    table = value_function(problem, np.linspace(-2, 2, 9), sweep)
    np.testing.assert_allclose(table.values, 0.0, atol=1e-12)


def test_value_function_worker_independent(cos_sweep):
    problem = make_problem("single_integrator_cos")
    ys = np.linspace(-0.5, 0.5, 5)
    a = value_function(problem, ys, cos_sweep, workers=1)
    b = value_function(problem, ys, cos_sweep, workers=2)
    np.testing.assert_array_equal(a.values, b.values)


def test_value_csv(tmp_path, cos_table):
    write_value_csv(tmp_path / "value.csv", tmp_path / "vpsi.csv", cos_table, "h")
    header, rows = read_csv(tmp_path / "value.csv")
    assert header == ["y1", "V", "mult", "count_roots"]
    assert len(rows) == 21
    assert rows[10][2:] == ["2", "3"]
    header, rows = read_csv(tmp_path / "vpsi.csv")
    assert header == ["y1", "V", "z1"]
    assert len(rows) == 2


def test_pair_map_full_rank_at_tie():
    problem = make_problem("single_integrator_cos")
    pr = pair_residual(problem, [-Z1], [Z1])
    np.testing.assert_allclose(pr.phi, 0.0, atol=1e-9)
    assert pr.jacobian.shape == (2, 2)
    assert pr.rank == 2


def test_pair_map_vanishes_on_diagonal():
    problem = make_problem("planar_lq")
    pr = pair_residual(problem, [0.3, 0.1], [0.3, 0.1])
    np.testing.assert_allclose(pr.phi, 0.0, atol=1e-14)
    assert pr.jacobian.shape == (3, 4)


def test_escaped_record_has_infinite_cost_and_pickles():
    rec = trajectory_cost(make_problem("example21"), [-1.0])
    assert rec.W == np.inf and rec.status == "escaped"
    back = pickle.loads(pickle.dumps(rec))
    assert back.arc is None and back.W == np.inf


@settings(max_examples=15, deadline=None)
@given(z=st.floats(-2.5, 2.5, allow_nan=False))
def test_reached_points_are_no_worse_than_the_extremal(z):
    problem = make_problem("single_integrator_cos")
    sweep = _SWEEP
    y = z - 2 * np.sin(z)
    sol = reach(problem, [y], sweep)
    assert sol.value <= np.sin(z) ** 2 + np.cos(z) + 1e-8


_SWEEP = build_reach_sweep(make_problem("single_integrator_cos"), [[-4.0, 4.0]], 161)
