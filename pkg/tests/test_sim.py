import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import zoh_discretize
from srmcomm.commutation import (CommutationTable, ConventionalTsf, NormalizedCommutation,
                                 TableCommutation)
from srmcomm.sim import (DiscreteController, InstabilityError, Plant, ReferenceProfile,
                         SimResult, controller_step, format_metrics, metrics, open_loop_ripple,
                         reference, run_closed_loop, run_feedforward, window_rms, wrap_relative,
                         write_result_csv)

P = 2 * math.pi / 131


@pytest.fixture(scope="module")
def sine(model):
    return ConventionalTsf(model, "sine")


@pytest.fixture(scope="module")
def exact(model, sine):
    return NormalizedCommutation(sine, model)


def test_wrap_examples():
    assert wrap_relative(0.0) == 0.0
    assert wrap_relative(math.pi) == -math.pi
    assert wrap_relative(2 * math.pi + 0.1) == pytest.approx(0.1, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_wrap_range(phi):
    w = wrap_relative(phi)
    assert -math.pi <= w < math.pi
    assert math.remainder(w - phi, 2 * math.pi) == pytest.approx(0.0, abs=1e-9)


def test_controller_step_examples():
    c = DiscreteController.stock()
    assert controller_step(c, 1.0) == pytest.approx(672000, rel=1e-15)
    assert controller_step(c, 1.0) == pytest.approx(264160, rel=1e-12)
    z = DiscreteController.integrating()
    assert all(z.step(0.0) == 0.0 for _ in range(50))
    with pytest.raises(ValueError):
        DiscreteController([1.0], [0.0, 1.0])


def test_controller_reset_and_recursion(rng):
    c = DiscreteController([2.0, -1.0, 0.5], [2.0, -1.0, 0.2])
    e = rng.normal(size=30)
    y = [c.step(v) for v in e]
    c.reset()
    assert [c.step(v) for v in e] == y
    # direct evaluation of the normalized difference equation
    ref = []
    for k in range(30):
        v = 1.0 * e[k] - 0.5 * (e[k - 1] if k >= 1 else 0) + 0.25 * (e[k - 2] if k >= 2 else 0)
        v += 0.5 * (ref[k - 1] if k >= 1 else 0) - 0.1 * (ref[k - 2] if k >= 2 else 0)
        ref.append(v)
    np.testing.assert_allclose(y, ref, rtol=1e-13, atol=1e-13)


def test_reference_examples():
    prof = ReferenceProfile.from_teeth_per_s(8.0, P)
    assert reference(prof, 0.0) == (0.0, 0.0)
    assert prof.t_accel == pytest.approx(1.25, rel=1e-14)
    assert prof.t_end - prof.t_accel == pytest.approx(1.875, rel=1e-14)
    r, rd = prof(prof.t_accel)
    assert rd == prof.velocity
    assert r == pytest.approx(5 * P, rel=1e-14)
    assert prof(prof.t_end + 1)[0] == pytest.approx(20 * P, rel=1e-14)
    with pytest.raises(ValueError):
        prof(-1.0)


def test_reference_c1(rng):
    prof = ReferenceProfile.from_teeth_per_s(3.0, P)
    for t0 in (prof.t_accel,):
        a, b = prof(t0 - 1e-9), prof(t0 + 1e-9)
        assert abs(a[0] - b[0]) <= 1e-9 * prof.velocity * 2.001
        assert abs(a[1] - b[1]) <= prof.accel * 1e-9 * 1.001
    t = np.sort(rng.uniform(0, prof.t_end, 200))
    rd = np.array([prof(x)[1] for x in t])
    assert np.all(rd >= 0) and np.all(rd <= prof.velocity)


def test_plant_validation():
    with pytest.raises(ValueError):
        Plant(A=((0.0,),))


def test_zero_reference_gives_zero(model, sine):
    res = run_feedforward(model, sine, np.zeros(50), m_sim=4)
    for arr in (res.phi, res.torque, res.u, res.tstar, res.r):
        assert not np.any(arr)


def test_r1_at_samples(model, exact):
    prof = ReferenceProfile.from_teeth_per_s(4.0, P, accel_teeth=0.5, const_teeth=1.0)
    res = run_closed_loop(model, exact, DiscreteController.integrating(), prof, m_sim=10)
    tol = 1e-9 * np.abs(res.sample_tstar) + 1e-12
    assert np.all(np.abs(res.sample_torque - res.sample_tstar) <= tol)


def _zoh_series(tstar):
    ad, bd = zoh_discretize(1e-3)
    x = np.zeros(2)
    out = []
    for tk in tstar:
        out.append(x[0])
        x = ad @ x + bd * tk
    return np.array(out)


def test_zoh_linearization(model, exact):
    # inter-sample ripple grows with the distance moved per sample, so the
    # match to the linear ZOH plant is checked with small torques
    tstar = 2e-4 * np.sin(np.arange(100) / 7.0) + 1e-4
    lin = _zoh_series(tstar)
    scale = np.max(np.abs(lin))
    res = run_feedforward(model, exact, tstar, m_sim=20)
    assert np.max(np.abs(res.sample_phi - lin)) <= 1e-6 * scale
    # the remaining deviation is physical, not integration error
    fine = run_feedforward(model, exact, tstar, m_sim=40)
    assert np.max(np.abs(fine.sample_phi - res.sample_phi)) <= 1e-9 * scale


def test_msim_does_not_change_held_input(model, sine):
    tstar = np.linspace(0, 3, 40)
    a = run_feedforward(model, sine, tstar, m_sim=5)
    b = run_feedforward(model, sine, tstar, m_sim=10)
    np.testing.assert_allclose(a.sample_u, b.sample_u, rtol=1e-9, atol=1e-15)
    # u is piecewise constant across each interval
    assert np.all(a.u[:5] == a.u[0])
    assert len(b.t) == 40 * 10 + 1
    np.testing.assert_allclose(np.diff(b.t), 1e-4, rtol=1e-9)


def test_msim_convergence(model, sine):
    prof = ReferenceProfile.from_teeth_per_s(8.0, P, accel_teeth=1.0, const_teeth=2.0)
    vals = [metrics(run_closed_loop(model, sine, DiscreteController.integrating(), prof,
                                    m_sim=m)).rms_error for m in (20, 40)]
    assert abs(vals[1] - vals[0]) <= 1e-3 * vals[1]


def test_divergence_guard(model, sine):
    with pytest.raises(InstabilityError):
        run_feedforward(model, sine, [1e12] * 5, m_sim=2)
    with pytest.raises(ValueError):
        run_feedforward(model, sine, [1.0], m_sim=0)


def _table_comm(default_problem, default_solutions):
    pos, neg = default_solutions
    return TableCommutation(CommutationTable(default_problem.theta, pos.values, neg.values), 131)


@pytest.mark.parametrize("target", [1.0, -1.0])
def test_open_loop_matches_optimizer(model, default_problem, default_solutions, target):
    comm = _table_comm(default_problem, default_solutions)
    sol = default_solutions[0 if target > 0 else 1]
    prob = default_problem.with_target(target)
    e = open_loop_ripple(model, comm, prob.velocity, 1e-3, 15, target=target)
    assert len(e) == 150 * 15 + 1
    resid = target * prob.residual(sol.values)
    np.testing.assert_allclose(e, resid, rtol=0, atol=1e-10)
    assert np.max(np.abs(e[:-1:15])) <= 1e-9
    assert np.max(np.abs(e)) > 1e-6


def test_open_loop_slow_limit(model, default_problem, default_solutions, exact):
    comm = _table_comm(default_problem, default_solutions)
    assert np.max(np.abs(open_loop_ripple(model, comm, 1e-6, 1e-3, 15))) <= 1e-6
    e = open_loop_ripple(model, exact, 0.5, 1e-3, 10, n_samples=50)
    j = np.arange(len(e)) % 10
    assert np.max(np.abs(e[j == 0])) <= 1e-12
    assert np.all(np.abs(e[j != 0]) > 0)
    with pytest.raises(ValueError):
        open_loop_ripple(model, exact, 0.5, 1e-3, 10, target=2.0)


def _result(t, y, window):
    n = len(t)
    z = np.zeros(n)
    return SimResult(1e-3, 1, P, t, z, y, z, z, np.zeros((n, 3)), z, z, z, z,
                     np.zeros((n, 3)), window=window)


def test_metrics_examples():
    t = np.linspace(0, 1, 101)
    m = metrics(_result(t, np.full(101, -0.3), (0.5, 1.0)))
    assert m.rms_error == pytest.approx(0.3, rel=1e-14)
    assert m.energy == 0.0
    assert m.rel_ripple_norm == 0.0
    text = format_metrics(m)
    parsed = dict(line.split(" = ") for line in text.splitlines())
    assert float(parsed["rms_error"]) == m.rms_error and float(parsed["energy"]) == 0.0
    with pytest.raises(ValueError):
        metrics(_result(t[:1], np.zeros(1), (0.5, 1.0)))
    with pytest.raises(ValueError):
        metrics(_result(t, np.zeros(101), (0.5, 1.5)))


def test_trapezoid_rms_density():
    w = 2 * math.pi * 3.0
    exact = math.sqrt(0.5)  # whole periods of sin over [0, 1]
    coarse = np.linspace(0, 1, 201)
    dense = np.linspace(0, 1, 20001)
    a = window_rms(coarse, np.sin(w * coarse), 0, 1)
    b = window_rms(dense, np.sin(w * dense), 0, 1)
    assert abs(a - b) <= 1e-3 * b
    assert b == pytest.approx(exact, rel=1e-6)
    with pytest.raises(ValueError):
        window_rms(coarse, coarse, 0.5, 0.2)


def test_csv_export(tmp_path, model, sine):
    res = run_feedforward(model, sine, [0.5, 1.0, 1.5], m_sim=2)
    path = tmp_path / "sim.csv"
    write_result_csv(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,r,phi,e,Tstar,T,u1,u2,u3"
    assert len(lines) == 1 + 3 * 2 + 1
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 5], res.torque)
