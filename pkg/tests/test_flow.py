import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmpflow.catalog import make_problem
from pmpflow.errors import EscapedArc, EscapedNeighborhood
from pmpflow.flow import (
    COMPLETE,
    ESCAPED,
    FlowOptions,
    export_arc,
    flow_jacobian,
    hamiltonian_drift,
    integrate_backward,
    integrate_variational,
    ode_residual,
    propagate,
    second_variation_along,
)
from pmpflow.io import read_csv
from pmpflow.optimality import cost_gradient, trajectory_cost

TIGHT = FlowOptions(rtol=1e-11, atol=1e-13)
J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])

zcos = st.floats(-3.0, 3.0, allow_nan=False)


def test_example21_escape_follows_closed_form(ex21):
    # from z = -1: x = 1 - t, p = 2 / (1 - t)^2, blowing up at t = 1
    arc = integrate_backward(ex21, [-1.0], opts=TIGHT)
    assert arc.status == ESCAPED
    assert 1.0 < arc.tau < 1.1
    s = arc.samples
    np.testing.assert_allclose(s.x[:, 0], 1.0 - s.t, atol=1e-8)
    np.testing.assert_allclose(s.p[:, 0], 2.0 / (1.0 - s.t) ** 2, rtol=1e-7)
    assert hamiltonian_drift(arc) < 1e-6


def test_escape_is_reported_through_variational(ex21):
    with pytest.raises(EscapedArc) as info:
        integrate_variational(ex21, [-1.0])
    assert info.value.tau == pytest.approx(1.044, abs=0.01)


@settings(max_examples=25, deadline=None)
@given(z=zcos)
def test_cos_closed_forms(z):
    # u* = sin z is constant, so x(0) = z - 2 sin z, p = -sin z
    problem = make_problem("single_integrator_cos")
    arc, bundle = integrate_variational(problem, [z], opts=TIGHT)
    assert arc.status == COMPLETE
    assert arc.x0[0] == pytest.approx(z - 2 * np.sin(z), abs=1e-9)
    assert arc.p0[0] == pytest.approx(-np.sin(z), abs=1e-10)
    assert bundle.X0[0, 0] == pytest.approx(1 - 2 * np.cos(z), abs=1e-9)
    assert bundle.Y0[0, 0] == pytest.approx(-np.cos(z), abs=1e-9)


@pytest.mark.parametrize("method", ["fd", "ode"])
def test_cos_second_variation(cos_problem, method):
    for z in (-2.0, 0.3, 1.7):
        sv = second_variation_along(cos_problem, [z], [1.0], opts=TIGHT, method=method)
        assert sv.xi0[0] == pytest.approx(2 * np.sin(z), abs=1e-6)
        assert sv.pi0[0] == pytest.approx(np.sin(z), abs=1e-6)


def test_second_variation_is_even_in_direction(planar):
    v = np.array([0.6, -0.8])
    a = second_variation_along(planar, [0.2, 0.1], v, method="ode")
    b = second_variation_along(planar, [0.2, 0.1], -v, method="ode")
    np.testing.assert_allclose(a.xi0, b.xi0, atol=1e-9)


def test_second_variation_reports_escaping_neighbourhood(ex21):
    with pytest.raises(EscapedNeighborhood):
        second_variation_along(ex21, [-1.0], [1.0], step=1e-3)


@settings(max_examples=20, deadline=None)
@given(z=zcos)
def test_cost_matches_closed_form(z):
    problem = make_problem("single_integrator_cos")
    rec = trajectory_cost(problem, [z], opts=TIGHT)
    assert rec.W == pytest.approx(np.sin(z) ** 2 + np.cos(z), abs=1e-9)


@pytest.mark.parametrize("label,z", [("single_integrator_cos", [0.7]), ("planar_lq", [0.4, -1.1]),
                                     ("example21", [-3.0])])
def test_cost_gradient_adjoint_form(label, z):
    problem = make_problem(label)
    z = np.asarray(z, dtype=float)
    g = cost_gradient(problem, z, opts=TIGHT)
    h = 1e-5
    fd = [(trajectory_cost(problem, z + h * e, opts=TIGHT).W - trajectory_cost(problem, z - h * e, opts=TIGHT).W)
          / (2 * h) for e in np.eye(z.size)]
    np.testing.assert_allclose(g, fd, atol=1e-6)


@pytest.mark.parametrize("label,z", [("single_integrator_cos", [0.7]), ("planar_lq", [0.4, -1.1]),
                                     ("example21", [-3.0]), ("single_integrator_quad", [1.0])])
def test_flow_jacobian_is_symplectic(label, z):
    problem = make_problem(label)
    n = problem.n
    J = np.kron(J2, np.eye(n))
    M = flow_jacobian(problem, z, opts=TIGHT)
    np.testing.assert_allclose(M.T @ J @ M, J, atol=1e-8)


@pytest.mark.parametrize("label,z", [("single_integrator_cos", [0.7]), ("planar_lq", [0.4, -1.1]),
                                     ("example21", [-3.0])])
def test_dense_output_satisfies_ode(label, z):
    problem = make_problem(label)
    arc = integrate_backward(problem, z)
    assert ode_residual(arc) <= 10.0


def test_propagate_round_trip(planar):
    arc = integrate_backward(planar, [0.5, 0.5], opts=TIGHT)
    x, p = propagate(planar, 0.0, arc.x0, arc.p0, planar.T, opts=TIGHT)
    np.testing.assert_allclose(x, [0.5, 0.5], atol=1e-9)
    np.testing.assert_allclose(p, planar.terminal_cost.gradient(np.array([0.5, 0.5])), atol=1e-9)


def test_propagate_escape(ex21):
    with pytest.raises(EscapedArc):
        propagate(ex21, 2.0, [-1.0], [2.0], 0.0)


def test_export_arc(tmp_path, ex21):
    arc = integrate_backward(ex21, [-1.0])
    export_arc(arc, tmp_path / "a.csv", tmp_path / "a.json", "abc123")
    header, rows = read_csv(tmp_path / "a.csv")
    assert header == ["t", "x1", "p1", "u1", "H"]
    t = np.array([float(r[0]) for r in rows])
    assert np.all(np.diff(t) > 0) and t[0] == pytest.approx(arc.t_start)
    assert (tmp_path / "a.csv").read_text().startswith("# config_hash=abc123")
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta["status"] == ESCAPED and meta["tau"] == pytest.approx(arc.tau)


def test_flow_options_validation():
    with pytest.raises(ValueError):
        FlowOptions(rtol=0.0)


def test_terminal_state_beyond_escape_radius(ex21):
    # psi = 2 exp(z + 1) makes p(T) enormous before any step is taken
    arc = integrate_backward(ex21, [31.0])
    assert arc.status == ESCAPED and arc.tau == ex21.T
    assert arc.samples.t.tolist() == [ex21.T]
