import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force, cvx_solve, g_default, lp_vertex, subsample_matrix
from srmcomm.motor import Harmonic, ModelError, MotorGeometry, TorqueGainModel
from srmcomm.ripple import (InfeasibleError, TableFormatError, assemble, build_grid,
                            format_table, load_table, nominal_velocity, parse_table, per_point_lp,
                            project_feasible, save_table, solve, table_metadata)

# Clarabel optimum of the default N=150, M=15 problem (independent conic solver)
CLARABEL_OBJ = {1000.0: 259.7509391523692, 10.0: 199.5521560418731}


def test_build_grid():
    np.testing.assert_allclose(build_grid(4), [-math.pi, -math.pi / 2, 0, math.pi / 2], atol=1e-15)
    g = build_grid(150)
    assert len(g) == 150
    np.testing.assert_allclose(np.diff(g), 2 * math.pi / 150, atol=1e-14)
    with pytest.raises(ValueError):
        build_grid(1)


def test_nominal_velocity():
    v = nominal_velocity(131, 150, 0.001)
    assert v == pytest.approx(0.3197550, abs=1e-7)
    assert v / (2 * math.pi / 131) == pytest.approx(20 / 3, rel=1e-14)
    assert nominal_velocity(1, 1, 2 * math.pi) == pytest.approx(1.0, abs=1e-15)
    for nt, n, ts in [(131, 150, 1e-3), (8, 33, 0.02), (3, 5, 7.0)]:
        assert nominal_velocity(nt, n, ts) * n * ts == pytest.approx(2 * math.pi / nt, rel=1e-14)


def test_assemble_shape_and_structure(model):
    p = assemble(model, 2, 2, 1.0, 1e-3)
    assert p.n_rows == 5 and p.matrix.shape == (5, 6)
    big = assemble(model, 12, 5, 1.0, 1e-3)
    a = big.matrix
    for row in range(a.shape[0]):
        k = min(row // 5, 11) if row < a.shape[0] - 1 else 0
        outside = np.delete(a[row], range(3 * k, 3 * k + 3))
        assert not outside.any()


def test_assemble_matches_formula(model):
    p = assemble(model, 6, 4, 1.0, 1e-3)
    theta, a = subsample_matrix(6, 4)
    np.testing.assert_allclose(p.theta, theta, atol=1e-15)
    np.testing.assert_allclose(p.matrix, a, atol=1e-13)
    assert p.velocity * p.n_grid * p.ts == pytest.approx(2 * math.pi / 131, rel=1e-14)


def test_j0_rows_vanish_at_feasible_points(model, rng):
    p = assemble(model, 10, 4, 1.0, 1e-3)
    g0 = model.eval_electrical(p.theta)
    f = project_feasible(rng.uniform(0, 2, (10, 3)), g0, 1.0)
    r = p.residual(f)
    assert np.max(np.abs(r[:-1].reshape(10, 4)[:, 0])) <= 1e-14
    assert abs(r[-1]) <= 1e-14


def test_assemble_rejects_bad_model():
    bad = TorqueGainModel(MotorGeometry(131), ((Harmonic(1, 1.0),), (), ()))
    with pytest.raises(ModelError):
        assemble(bad, 10, 3, 1.0, 1e-3)


def test_project_examples():
    np.testing.assert_allclose(project_feasible([0, 0, 0], [1, 1, 1]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(project_feasible([0, 0, 0], [1, 0, -1]), [1, 0, 0], atol=1e-15)
    y = np.array([0.2, 0.5, 0.1])
    g = np.array([1.0, 0.8, -0.3])
    y = y / (g @ y)
    np.testing.assert_allclose(project_feasible(y, g), y, atol=1e-15)
    with pytest.raises(InfeasibleError):
        project_feasible([0, 0, 0], [-1, -0.5, 0])
    with pytest.raises(InfeasibleError):
        project_feasible([0, 0, 0], [1, 0.5, 0], target=-1.0)


def _proj_oracle(y, g, t):
    import cvxpy as cp

    f = cp.Variable(3)
    cp.Problem(cp.Minimize(cp.sum_squares(f - y)), [f >= 0, g @ f == t]).solve(solver=cp.CLARABEL)
    return np.asarray(f.value)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3),
       st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.sampled_from([1.0, -1.0]))
def test_project_against_oracle(y, g, t):
    y, g = np.array(y), np.array(g)
    if np.max(g * t) < 0.05:
        return
    f = project_feasible(y, g, t)
    assert np.all(f >= 0)
    assert g @ f == pytest.approx(t, abs=1e-10)
    ref = _proj_oracle(y, g, t)
    assert np.sum((f - y) ** 2) <= np.sum((ref - y) ** 2) + 1e-7


def test_per_point_lp_examples():
    np.testing.assert_array_equal(per_point_lp([2, 0.5, -1], 1.0), [0.5, 0, 0])
    np.testing.assert_array_equal(per_point_lp([1, 1, 1], 1.0), [1, 0, 0])
    np.testing.assert_array_equal(per_point_lp([-2, 1, 0], -1.0), [0.5, 0, 0])
    with pytest.raises(InfeasibleError):
        per_point_lp([-1, -1, 0], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.sampled_from([1.0, -1.0]))
def test_per_point_lp_matches_vertices(g, t):
    g = np.array(g)
    if np.max(g * t) <= 1e-6:
        return
    assert np.sum(per_point_lp(g, t)) == pytest.approx(np.sum(lp_vertex(g, t)), rel=1e-14)


def test_beta_zero_is_lp(model):
    p = assemble(model, 150, 15, 0.0, 1e-3)
    s = solve(p)
    lp = np.array([lp_vertex(g) for g in g_default(p.theta)])
    assert np.max(np.abs(s.values - lp)) <= 1e-8


@pytest.mark.parametrize("beta", [0.0, 1.0, 100.0])
@pytest.mark.parametrize("target", [1.0, -1.0])
def test_small_problem_oracle(model, beta, target):
    s = solve(assemble(model, 4, 3, beta, 1e-3, target=target))
    ref, _ = brute_force(4, 3, beta, target)
    assert s.objective == pytest.approx(ref, rel=1e-6)
    assert s.objective <= ref * (1 + 1e-12)


@pytest.mark.parametrize("n,m,beta", [(7, 4, 3.0), (20, 6, 50.0), (13, 1, 5.0)])
def test_against_conic_solver(model, n, m, beta):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ref, _ = cvx_solve(n, m, beta)
    s = solve(assemble(model, n, m, beta, 1e-3))
    assert s.objective == pytest.approx(ref, rel=1e-8)


@pytest.mark.parametrize("beta", [1000.0, 10.0])
def test_full_scale_against_frozen_conic(model, beta):
    s = solve(assemble(model, 150, 15, beta, 1e-3))
    assert s.objective == pytest.approx(CLARABEL_OBJ[beta], rel=1e-9)


def test_default_solution_feasible(default_solutions, default_problem):
    for s, t in zip(default_solutions, (1.0, -1.0)):
        assert s.equality_residual <= 1e-8
        assert np.min(s.values) >= -1e-12
        g0 = g_default(default_problem.theta)
        assert np.max(np.abs(np.sum(g0 * s.values, axis=1) - t)) <= 1e-8
        assert s.kkt_residual <= 1e-8


def test_monotone_tradeoff(model):
    p = assemble(model, 60, 8, 0.0, 1e-3)
    sols = [solve(p.with_beta(b)) for b in (0.0, 0.1, 1.0, 3.0, 10.0, 100.0, 1000.0)]
    ripple = [s.ripple for s in sols]
    power = [s.power for s in sols]
    assert all(a >= b - 1e-12 for a, b in zip(ripple, ripple[1:]))
    assert all(a <= b + 1e-12 for a, b in zip(power, power[1:]))


def test_grid_rotation(model):
    n = 30
    a = solve(assemble(model, n, 5, 20.0, 1e-3))
    b = solve(assemble(model, n, 5, 20.0, 1e-3, grid_offset=-math.pi + 2 * math.pi / n))
    np.testing.assert_allclose(b.values, np.roll(a.values, -1, axis=0), atol=1e-6)


def test_deterministic_and_warm_start(model):
    p = assemble(model, 40, 6, 30.0, 1e-3)
    a, b = solve(p), solve(p)
    assert np.array_equal(a.values, b.values)
    warm = solve(p.with_beta(60.0))
    c = solve(p, warm_start=warm)
    assert c.objective == pytest.approx(a.objective, rel=1e-12)


def test_table_round_trip(tmp_path, default_problem, default_solutions):
    s = default_solutions[0]
    path = tmp_path / "table.csv"
    save_table(path, default_problem.theta, s.values, table_metadata(default_problem, s))
    theta, values, meta = load_table(path)
    assert np.array_equal(theta, default_problem.theta)
    assert np.array_equal(values, s.values)
    assert meta["n_grid"] == 150 and meta["beta"] == 1000.0 and meta["ripple"] == s.ripple


def test_table_parse_errors():
    good = format_table([0.0, 1.0], [[1, 2, 3], [4, 5, 6]], {"n_grid": 2})
    parse_table(good)
    with pytest.raises(TableFormatError, match="unsupported table version"):
        parse_table(good.replace("srmcomm-table 1", "srmcomm-table 9"))
    with pytest.raises(TableFormatError, match="line 5"):
        parse_table(good.replace("1,4,5,6", "1,4,x,6"))
    with pytest.raises(TableFormatError, match="line 5"):
        parse_table(good.replace("1,4,5,6", "1,4,5"))
    with pytest.raises(TableFormatError, match="no data rows"):
        parse_table("# srmcomm-table 1\ntheta_e,f1,f2,f3\n")
