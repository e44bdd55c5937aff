import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfdrbsde.drbsde import FrozenData, solve_reflected
from mfdrbsde.lattice import AdaptedProcess, Lattice, cond_exp_next, d_norm
from mfdrbsde.model import make_spec
from mfdrbsde.penalization import (
    ScheduleError,
    StageError,
    StageFrozen,
    cascade,
    counterexample_run,
    doubling_schedule,
    freeze_stage,
    monotonicity_check,
    solve_mean_field_bsde,
    solve_node_equation,
    solve_penalized_stage,
    stage_monitor,
    terminal_second_moment,
)


def constant_frozen(lat, lower, upper, ybar=0.0):
    return StageFrozen(
        np.full(lat.steps + 1, ybar), AdaptedProcess.constant(lat, lower), AdaptedProcess.constant(lat, upper)
    )


def monotone_spec(rng):
    a1, a2 = rng.uniform(0, 0.5, 2).tolist()
    g1, g2, b1, b2 = rng.uniform(0, 0.1, 4).tolist()
    c, amp, shift, s = rng.uniform([0.5, 0, -1, 0.1], [3, 2, 1, 0.6]).tolist()
    return make_spec(
        f"{a1!r}*y + {a2!r}*ybar + {amp!r}*sin({c!r}*b) + {shift!r}",
        f"-1 + {g1!r}*min(y, 5) + {g2!r}*min(ybar, 5)",
        f"1 + {b1!r}*max(y, -5) + {b2!r}*max(ybar, -5)",
        f"{s!r}*b/sqrt(1 + b^2)",
        dict(cf=a1 + a2, gamma1=g1, gamma2=g2, beta1=b1, beta2=b2),
    )


def test_node_solver_piecewise_linear():
    # y - 1 - 0.5 * 10 * (2 - y)^+ = 0 has root y = 11/6
    G = lambda y: (y - 1 - 5 * np.maximum(2 - y, 0), 1 + 5 * (y < 2))  # noqa: E731
    np.testing.assert_allclose(solve_node_equation(G, np.array([0.0, 50.0])), 11 / 6, atol=1e-13)


def test_zero_stage():
    lat = Lattice(1.0, 10)
    st_ = solve_mean_field_bsde(make_spec(), lat)
    assert st_.Y.max_abs() == 0.0 and st_.Kplus.max_abs() == 0.0


def test_mean_field_stage_self_consistent():
    lat = Lattice(1.0, 20)
    spec = make_spec("0.5*y + 0.8*ybar + cos(b)", terminal="sin(b)", lipschitz=dict(cf=1.3))
    st_ = solve_mean_field_bsde(spec, lat)
    Y, ex = st_.Y, st_.Y.expectations()
    for k in range(lat.steps):
        t, b = lat.time(k), lat.brownian(k)
        rhs = cond_exp_next(Y.level(k + 1)) + lat.dt * spec.f(t, b, Y.level(k), ex[k])
        np.testing.assert_allclose(Y.level(k), rhs, atol=1e-13)


def test_one_sided_penalty_approaches_reflection():
    lat = Lattice(1.0, 20)
    spec = make_spec()
    fd = FrozenData(
        AdaptedProcess.zeros(lat),
        AdaptedProcess.constant(lat, 0.5),
        AdaptedProcess.constant(lat, np.inf),
        np.zeros(lat.steps + 1),
    )
    target = solve_reflected(fd, validate=False).Y
    gaps = []
    # one penalized step shrinks the gap by 1 / (1 + m dt)
    for m in (100, 1000, 10000):
        st_ = solve_penalized_stage(spec, lat, 0, m, constant_frozen(lat, 0.5, np.inf))
        gap = (st_.Y - target).values[: lat.steps].__abs__().max()
        gaps.append(gap)
        assert gap <= 0.5 / (1 + m * lat.dt) + 1e-15
    assert gaps[0] > gaps[1] > gaps[2]


def test_stage_budget_identity():
    lat = Lattice(1.0, 15)
    rng = np.random.default_rng(0)
    spec = monotone_spec(rng)
    prev = solve_mean_field_bsde(spec, lat)
    st_ = solve_penalized_stage(spec, lat, 8, 16, freeze_stage(spec, prev))
    lo, hi = st_.frozen.lower, st_.frozen.upper
    for k in range(lat.steps):
        y = st_.Y.level(k)
        np.testing.assert_allclose(st_.dKplus.level(k), 16 * lat.dt * np.maximum(lo.level(k) - y, 0), atol=1e-15)
        np.testing.assert_allclose(st_.dKminus.level(k), 8 * lat.dt * np.maximum(y - hi.level(k), 0), atol=1e-15)
        budget = cond_exp_next(st_.Y.level(k + 1)) + lat.dt * st_.driver.level(k)
        budget = budget + st_.dKplus.level(k) - st_.dKminus.level(k)
        np.testing.assert_allclose(y, budget, atol=1e-13)


def test_coarse_lattice_rejected():
    lat = Lattice(1.0, 2)
    with pytest.raises(StageError, match="coarse"):
        solve_mean_field_bsde(make_spec(driver="3*y", lipschitz=dict(cf=3.0)), lat)


def test_stage_without_frozen_data_only_at_origin():
    with pytest.raises(ValueError):
        solve_penalized_stage(make_spec(), Lattice(1.0, 2), 1, 0, None)


def test_schedules():
    assert doubling_schedule(0) == [0]
    assert doubling_schedule(8) == [0, 1, 2, 4, 8]
    assert doubling_schedule(6) == [0, 1, 2, 4, 6]
    lat = Lattice(1.0, 3)
    spec = make_spec(lower="-1", upper="1")
    for bad in ([1, 2], [0, 2, 2], [0, 4, 2], []):
        with pytest.raises(ScheduleError):
            cascade(spec, lat, bad, [0, 1])


def test_sentinel_cascade_stops_at_origin():
    lat = Lattice(1.0, 10)
    spec = make_spec("0.3*ybar + b", terminal="b", lipschitz=dict(cf=0.3))
    state, report = cascade(spec, lat)
    assert report.final_stage == (0, 0) and len(report.stages) == 1
    assert (state.Y - solve_mean_field_bsde(spec, lat).Y).max_abs() == 0.0


def test_inactive_barriers_keep_origin_solution():
    lat = Lattice(1.0, 12)
    spec = make_spec("0.2*ybar", "-5 + 0.01*y", "5 + 0.01*y", "0.1*b", dict(cf=0.2, gamma1=0.01, beta1=0.01))
    state, report = cascade(spec, lat, tol=1e-8)
    base = solve_mean_field_bsde(spec, lat)
    assert d_norm(state.Y - base.Y) <= 1e-8
    assert state.Kplus.max_abs() == 0.0 and state.Kminus.max_abs() == 0.0
    assert report.n_limit_reached


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_chain_on_random_specs(seed):
    lat = Lattice(1.0, 12)
    spec = monotone_spec(np.random.default_rng(seed))
    _, report = cascade(spec, lat, doubling_schedule(64), doubling_schedule(64), tol=1e-7)
    assert report.monotonicity.pairs_checked > 0
    assert report.monotonicity.passed, report.monotonicity


def test_monotonicity_check_identical_stages():
    Y = np.arange(9.0).reshape(3, 3)
    rep = monotonicity_check({(0, 0): Y, (0, 1): Y, (1, 0): Y})
    assert rep.pairs_checked == 2 and rep.violations == 0 and rep.worst == 0.0


def test_monotonicity_check_reports_violation():
    rep = monotonicity_check({(0, 0): np.zeros(2), (0, 1): -np.ones(2)})
    assert not rep.passed and rep.worst == 1.0 and rep.worst_pair == ((0, 0), (0, 1))


def test_origin_below_first_lower_penalty_stage():
    lat = Lattice(1.0, 20)
    spec = monotone_spec(np.random.default_rng(5))
    _, report = cascade(spec, lat, [0, 1], [0, 1], tol=None)
    h = report.history
    assert np.all(h[(0, 0)] <= h[(0, 1)] + 1e-9)
    assert np.all(h[(1, 0)] <= h[(0, 0)] + 1e-9)


def test_monitors_and_penalty_decay():
    lat = Lattice(1.0, 30)
    spec = make_spec(
        "0.3*ybar + 2*sin(3*b) + 0.5", "-1 + 0.05*min(y, 5)", "1 + 0.05*max(y, -5)", "b/sqrt(1 + b^2)",
        dict(cf=0.3, gamma1=0.05, beta1=0.05),
    )
    _, report = cascade(spec, lat, [0], doubling_schedule(1024), tol=None)
    assert report.monitors_finite()
    row = report.stages
    for a, b in zip(row[1:], row[2:]):
        assert b.sup_second_moment <= 10 * a.sup_second_moment
        assert b.lower_penalty_measure <= a.lower_penalty_measure + 1e-15


def test_terminal_second_moment_exact():
    lat = Lattice(1.0, 2)
    dK = np.zeros(lat.shape)
    dK[0, 0] = 1.0
    dK[1, 1] = 2.0
    # paths: up-up, up-down give K_T = 3; the others give 1
    assert terminal_second_moment(AdaptedProcess(lat, dK)) == pytest.approx(0.5 * 9 + 0.5 * 1)


def test_stage_monitor_fields():
    lat = Lattice(1.0, 6)
    spec = make_spec(lower="-1", upper="1")
    mon = stage_monitor(solve_mean_field_bsde(spec, lat))
    assert mon.sup_second_moment == 0.0 and mon.z_energy == 0.0


def test_counterexample_short():
    rep = counterexample_run(Lattice(1.0, 20), doubling_schedule(64))
    assert rep.passed
    assert rep.plain_exact_error <= 1e-12
    assert all(r.expectations[0] >= 0 for r in rep.rows)


def test_counterexample_needs_unit_horizon():
    with pytest.raises(ValueError):
        counterexample_run(Lattice(2.0, 10))
