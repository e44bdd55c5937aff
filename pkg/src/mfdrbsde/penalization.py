"""Double-indexed penalisation of the mean-field doubly reflected BSDE.

Stage ``(n, m)`` solves, node by node and backward in time,

    y = e + dt * [f(t, b, y, ybar_prev, z) + m (y - L_prev)^- - n (y - U_prev)^+]

with ``e = E[Y_{k+1} | F_k]``, ``z`` the one-step martingale integrand of
``Y_{k+1}``, and ``ybar_prev``, ``L_prev``, ``U_prev`` frozen at the stage
that precedes ``(n, m)`` in both indices.  Stage ``(0, 0)`` is the plain
mean-field BSDE whose expectation term is solved self-consistently level by
level.

Limits are taken in the order m first (for each n), then n.  Penalty indices
come from explicit schedules (by default 0, 1, 2, 4, ...); "the preceding
stage" means the preceding schedule entry in each index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .drbsde import cumulate_pushes
from .lattice import AdaptedProcess, Lattice, cond_exp_next, d_norm, martingale_increment
from .model import ProblemSpec, make_spec

NODE_TOL = 1e-13
MEAN_FIELD_TOL = 1e-14


class StageError(RuntimeError):
    """A stage could not be solved (coarse lattice or solver failure)."""


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StageFrozen:
    """Quantities frozen from the preceding stage."""

    ybar: np.ndarray  # per-level expectations
    lower: AdaptedProcess
    upper: AdaptedProcess


@dataclass(eq=False)
class PenalizationState:
    n: int
    m: int
    Y: AdaptedProcess
    Z: AdaptedProcess
    dKplus: AdaptedProcess
    dKminus: AdaptedProcess
    Kplus: AdaptedProcess
    Kminus: AdaptedProcess
    frozen: StageFrozen | None  # None for the self-consistent (0, 0) stage
    driver: AdaptedProcess = field(repr=False, default=None)

    @property
    def stage(self) -> tuple[int, int]:
        return (self.n, self.m)


def solve_node_equation(G, y0: np.ndarray, tol: float = NODE_TOL, max_iter: int = 200) -> np.ndarray:
    """Vectorised safeguarded Newton for increasing scalar equations ``G(y) = 0``.

    ``G`` returns ``(residual, slope)``.  A sign-change bracket is grown
    first, then Newton steps are accepted only inside the bracket (bisection
    otherwise).
    """
    y = np.array(y0, dtype=float)
    r, s = G(y)
    lo = y.copy()
    hi = y.copy()
    r_lo = r.copy()
    r_hi = r.copy()
    step = np.abs(r) + 1e-12
    for _ in range(200):
        need_lo = r_lo > 0
        need_hi = r_hi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        step = np.where(need_lo | need_hi, 2.0 * step, step)
        lo = np.where(need_lo, y - step, lo)
        hi = np.where(need_hi, y + step, hi)
        r_lo = np.where(need_lo, G(lo)[0], r_lo)
        r_hi = np.where(need_hi, G(hi)[0], r_hi)
    else:
        raise StageError("could not bracket the node equation")
    done = np.abs(r) <= tol * (1.0 + np.abs(y))
    for _ in range(max_iter):
        if done.all():
            return y
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = y - r / s
        ok = (s > 0) & (newton > lo) & (newton < hi) & np.isfinite(newton)
        cand = np.where(ok, newton, 0.5 * (lo + hi))
        y = np.where(done, y, cand)
        r, s = G(y)
        lo = np.where(~done & (r < 0), y, lo)
        hi = np.where(~done & (r > 0), y, hi)
        width = hi - lo
        done = done | (np.abs(r) <= tol * (1.0 + np.abs(y))) | (width <= 4e-16 * (1.0 + np.abs(y)))
    raise StageError(f"node equation not solved to {tol:g} in {max_iter} iterations")


def _check_resolution(spec: ProblemSpec, lat: Lattice):
    if lat.dt * spec.lipschitz.cf >= 1:
        raise StageError(
            f"dt * C_f = {lat.dt * spec.lipschitz.cf:.3g} >= 1: the lattice is too coarse "
            "for the declared Lipschitz constant"
        )


def _solve_level(spec, t, b, e, z, ybar, lo, hi, n, m, dt, y_start=None):
    def G(y):
        fv, fy = spec.f_dy(t, b, y, ybar, z)
        below = y < lo
        above = y > hi
        with np.errstate(invalid="ignore"):
            pen_lo = np.where(below, m * (lo - y), 0.0)
            pen_hi = np.where(above, n * (y - hi), 0.0)
        res = y - e - dt * (fv + pen_lo - pen_hi)
        slope = 1.0 - dt * fy + dt * m * below + dt * n * above
        return res, slope

    y0 = e + dt * spec.f(t, b, e, ybar, z) if y_start is None else y_start
    return solve_node_equation(G, y0)


def solve_penalized_stage(
    spec: ProblemSpec,
    lat: Lattice,
    n: int,
    m: int,
    frozen: StageFrozen | None,
    mean_field: bool = True,
) -> PenalizationState:
    """One stage of the cascade.

    With ``frozen=None`` the expectation term is solved self-consistently at
    each level (the plain mean-field BSDE; only allowed for ``n = m = 0``).
    ``mean_field=False`` replaces the expectation argument by zero.
    """
    if n < 0 or m < 0:
        raise ValueError("penalty indices must be >= 0")
    if frozen is None and (n, m) != (0, 0):
        raise ValueError("only stage (0, 0) may be solved without frozen data")
    _check_resolution(spec, lat)
    N, dt = lat.steps, lat.dt
    Y = np.zeros(lat.shape)
    Z = np.zeros(lat.shape)
    dKp = np.zeros(lat.shape)
    dKm = np.zeros(lat.shape)
    drv = np.zeros(lat.shape)
    Y[N] = spec.terminal_values(lat)
    inf = np.full(N + 1, math.inf)
    for k in range(N - 1, -1, -1):
        t = lat.time(k)
        b = lat.brownian(k)
        nxt = Y[k + 1, : k + 2]
        e = cond_exp_next(nxt)
        z = martingale_increment(nxt, dt)
        if frozen is None:
            lo, hi = -inf[: k + 1], inf[: k + 1]
        else:
            lo, hi = frozen.lower.level(k), frozen.upper.level(k)
        if not mean_field:
            y = _solve_level(spec, t, b, e, z, 0.0, lo, hi, n, m, dt)
            ybar = 0.0
        elif frozen is not None:
            ybar = float(frozen.ybar[k])
            y = _solve_level(spec, t, b, e, z, ybar, lo, hi, n, m, dt)
        else:
            y, ybar = _solve_mean_field_level(spec, lat, k, t, b, e, z, lo, hi, dt)
        Y[k, : k + 1] = y
        Z[k, : k + 1] = z
        with np.errstate(invalid="ignore"):
            dKp[k, : k + 1] = np.where(y < lo, m * dt * (lo - y), 0.0)
            dKm[k, : k + 1] = np.where(y > hi, n * dt * (y - hi), 0.0)
        drv[k, : k + 1] = spec.f(t, b, y, ybar, z)
    return PenalizationState(
        n=n,
        m=m,
        Y=AdaptedProcess(lat, Y),
        Z=AdaptedProcess(lat, Z),
        dKplus=AdaptedProcess(lat, dKp),
        dKminus=AdaptedProcess(lat, dKm),
        Kplus=AdaptedProcess(lat, cumulate_pushes(dKp, lat)),
        Kminus=AdaptedProcess(lat, cumulate_pushes(dKm, lat)),
        frozen=frozen,
        driver=AdaptedProcess(lat, drv),
    )


def _solve_mean_field_level(spec, lat, k, t, b, e, z, lo, hi, dt, max_iter: int = 500):
    w = lat.weights(k)
    ybar = float(np.dot(w, e))
    y = None
    for _ in range(max_iter):
        y = _solve_level(spec, t, b, e, z, ybar, lo, hi, 0, 0, dt, y_start=y)
        new = float(np.dot(w, y))
        if abs(new - ybar) <= MEAN_FIELD_TOL * (1.0 + abs(new)):
            # final solve at the converged expectation so y and ybar match
            return _solve_level(spec, t, b, e, z, new, lo, hi, 0, 0, dt, y_start=y), new
        ybar = new
    raise StageError(f"expectation fixed point at level {k} did not converge")


def solve_mean_field_bsde(spec: ProblemSpec, lat: Lattice) -> PenalizationState:
    """Stage (0, 0): the unreflected mean-field BSDE."""
    return solve_penalized_stage(spec, lat, 0, 0, None)


def freeze_stage(spec: ProblemSpec, state: PenalizationState, mean_field: bool = True) -> StageFrozen:
    """Expectations and barrier values of a finished stage, for its successors."""
    lat = state.Y.lattice
    ybar = state.Y.expectations() if mean_field else np.zeros(lat.steps + 1)
    t, b = lat.time_grid, lat.brownian_grid
    Yv = state.Y.values
    return StageFrozen(
        ybar=ybar,
        lower=AdaptedProcess(lat, spec.h(t, b, Yv, ybar[:, None])),
        upper=AdaptedProcess(lat, spec.g(t, b, Yv, ybar[:, None])),
    )


# ---------------------------------------------------------------------------
# monitors


def terminal_second_moment(dK: AdaptedProcess, stop: int | None = None) -> float:
    """``E[(sum_k dK_k)^2]`` along paths, exactly, by backward moment recursion."""
    lat = dK.lattice
    stop = lat.steps if stop is None else stop
    first = np.zeros(stop + 1)
    second = np.zeros(stop + 1)
    for k in range(stop - 1, -1, -1):
        d = dK.level(k)
        ef, es = cond_exp_next(first), cond_exp_next(second)
        second = d * d + 2.0 * d * ef + es
        first = d + ef
    return float(second[0])


@dataclass
class StageMonitor:
    n: int
    m: int
    sup_second_moment: float  # sup_t E[Y_t^2]
    z_energy: float  # E[int |Z|^2 dt]
    kplus_terminal_sq: float  # E[(K+_T)^2]
    kminus_terminal_sq: float
    lower_violation_sq: float  # E[int ((Y - L_prev)^-)^2 dt]
    upper_violation_sq: float
    lower_penalty_measure: float  # E[int (Y - L_prev)^- dt]
    upper_penalty_measure: float
    m_gap: float | None = None  # d_norm to the previous stage in m
    n_gap: float | None = None  # d_norm to the previous row's limit


def stage_monitor(state: PenalizationState) -> StageMonitor:
    lat = state.Y.lattice
    N, dt = lat.steps, lat.dt
    w = lat.node_weights
    Y = state.Y.values
    inner = lat.mask.copy()
    inner[N] = False
    if state.frozen is None:
        lo_v = up_v = np.zeros(lat.shape)
    else:
        with np.errstate(invalid="ignore"):
            lo_v = np.where(inner, np.maximum(state.frozen.lower.values - Y, 0.0), 0.0)
            up_v = np.where(inner, np.maximum(Y - state.frozen.upper.values, 0.0), 0.0)
    return StageMonitor(
        n=state.n,
        m=state.m,
        sup_second_moment=float(np.max(np.sum(w * Y * Y, axis=1))),
        z_energy=float(dt * np.sum((w * state.Z.values**2)[inner])),
        kplus_terminal_sq=terminal_second_moment(state.dKplus),
        kminus_terminal_sq=terminal_second_moment(state.dKminus),
        lower_violation_sq=float(dt * np.sum(w * lo_v**2)),
        upper_violation_sq=float(dt * np.sum(w * up_v**2)),
        lower_penalty_measure=float(dt * np.sum(w * lo_v)),
        upper_penalty_measure=float(dt * np.sum(w * up_v)),
    )


@dataclass
class MonotonicityReport:
    pairs_checked: int
    violations: int
    worst: float  # largest amount by which an inequality fails (0 if none)
    worst_pair: tuple | None

    @property
    def passed(self) -> bool:
        return self.violations == 0


def monotonicity_check(history: dict, tol: float = 1e-9) -> MonotonicityReport:
    """Check ``Y^{n+1,m} <= Y^{n,m} <= Y^{n,m+1}`` node-wise over recorded stages.

    ``history`` maps schedule positions ``(i, j)`` to Y processes (or arrays);
    "n + 1" and "m + 1" refer to the next schedule entry.
    """
    def arr(v):
        return v.values if isinstance(v, AdaptedProcess) else np.asarray(v)

    pairs = violations = 0
    worst, worst_pair = 0.0, None
    for (i, j), Y in history.items():
        Y = arr(Y)
        for below_key, above_key in (((i + 1, j), (i, j)), ((i, j), (i, j + 1))):
            if below_key not in history or above_key not in history:
                continue
            below = arr(history[below_key])
            above = arr(history[above_key])
            excess = float(np.max(below - above))
            pairs += 1
            if excess > tol:
                violations += 1
            if excess > worst:
                worst, worst_pair = excess, (below_key, above_key)
    return MonotonicityReport(pairs, violations, worst, worst_pair)


# ---------------------------------------------------------------------------
# cascade


def doubling_schedule(top: int) -> list[int]:
    """``[0, 1, 2, 4, ..., top]`` (top need not be a power of two)."""
    if top < 0:
        raise ScheduleError("schedule top must be >= 0")
    out = [0]
    v = 1
    while v < top:
        out.append(v)
        v *= 2
    if top > 0:
        out.append(top)
    return out


def _check_schedule(values, name):
    values = [int(v) for v in values]
    if not values or values[0] != 0:
        raise ScheduleError(f"{name} schedule must start at 0, got {values}")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ScheduleError(f"{name} schedule must be strictly increasing, got {values}")
    return values


@dataclass
class CascadeReport:
    stages: list  # StageMonitor per computed stage, in order
    monotonicity: MonotonicityReport
    m_limits: dict  # n -> m at which the m-limit was declared (or the last m)
    n_limit_reached: bool
    final_stage: tuple
    history: dict = field(repr=False, default_factory=dict)  # (i, j) -> Y values

    def monitors_finite(self) -> bool:
        for s in self.stages:
            vals = [v for k, v in vars(s).items() if isinstance(v, float)]
            if not all(math.isfinite(v) for v in vals):
                return False
        return True


def cascade(
    spec: ProblemSpec,
    lat: Lattice,
    n_schedule=None,
    m_schedule=None,
    tol: float | None = 1e-6,
    diagonal: bool = False,
    record_history: bool = True,
    mean_field: bool = True,
) -> tuple[PenalizationState, CascadeReport]:
    """Run the penalisation cascade.

    For each ``n`` (outer) the ``m`` index is raised until the ``d_norm`` gap
    between consecutive stages is at most ``tol``; then ``n`` advances, and
    the run stops once the row limits differ by at most ``tol`` or the
    schedules are exhausted.  ``tol=None`` disables limit detection.
    Stage ``(i, j)`` freezes its data at ``(i-1, j-1)`` (schedule positions),
    with position -1 read as 0; a row that stopped early is extended by its
    last stage.  ``diagonal=True`` runs ``(n_i, m_i)`` pairs instead
    (experimental).  ``mean_field=False`` drops the expectation argument
    everywhere.
    """
    n_schedule = _check_schedule(n_schedule if n_schedule is not None else doubling_schedule(1024), "n")
    m_schedule = _check_schedule(m_schedule if m_schedule is not None else doubling_schedule(1024), "m")
    if diagonal and len(n_schedule) != len(m_schedule):
        raise ScheduleError("diagonal cascade needs schedules of equal length")

    history: dict = {}
    monitors: list[StageMonitor] = []
    m_limits: dict = {}

    def record(i, j, state, m_gap=None, n_gap=None):
        mon = stage_monitor(state)
        mon.m_gap, mon.n_gap = m_gap, n_gap
        monitors.append(mon)
        if record_history:
            history[(i, j)] = state.Y.values

    base = solve_penalized_stage(spec, lat, 0, 0, None, mean_field)
    record(0, 0, base)
    if spec.unconstrained:
        m_limits[0] = 0
        return base, _report(monitors, history, m_limits, True, (0, 0))

    if diagonal:
        state = base
        for i in range(1, len(n_schedule)):
            prev = state
            state = solve_penalized_stage(
                spec, lat, n_schedule[i], m_schedule[i], freeze_stage(spec, prev, mean_field), mean_field
            )
            gap = d_norm(state.Y - prev.Y)
            record(i, i, state, m_gap=gap)
            if tol is not None and gap <= tol:
                return state, _report(monitors, history, m_limits, True, state.stage)
        return state, _report(monitors, history, m_limits, False, state.stage)

    prev_row: list[PenalizationState] | None = None
    n_done = False
    state = base
    for i, n in enumerate(n_schedule):
        row: list[PenalizationState] = []
        for j, m in enumerate(m_schedule):
            if i == 0 and j == 0:
                state = base
                row.append(state)
                continue
            if i == 0:
                src = row[j - 1]
            else:
                src = prev_row[min(max(j - 1, 0), len(prev_row) - 1)]
            state = solve_penalized_stage(spec, lat, n, m, freeze_stage(spec, src, mean_field), mean_field)
            m_gap = d_norm(state.Y - row[-1].Y) if row else None
            row.append(state)
            n_gap = None
            if i > 0 and j < len(prev_row):
                n_gap = d_norm(state.Y - prev_row[j].Y)
            record(i, j, state, m_gap, n_gap)
            if tol is not None and m_gap is not None and m_gap <= tol:
                break
        m_limits[n] = row[-1].m
        if i > 0 and tol is not None and d_norm(row[-1].Y - prev_row[-1].Y) <= tol:
            n_done = True
            break
        prev_row = row
    return state, _report(monitors, history, m_limits, n_done, state.stage)


def _report(monitors, history, m_limits, n_done, final_stage):
    return CascadeReport(
        stages=monitors,
        monotonicity=monotonicity_check(history) if history else MonotonicityReport(0, 0, 0.0, None),
        m_limits=m_limits,
        n_limit_reached=n_done,
        final_stage=final_stage,
        history=history,
    )


# ---------------------------------------------------------------------------
# counterexample: lower barrier y + ybar + 1, driver 1, terminal -1 on [0, 1]


COUNTEREXAMPLE_CBAR = 10.0


def counterexample_spec(cbar: float = COUNTEREXAMPLE_CBAR) -> ProblemSpec:
    return make_spec(
        driver="1",
        lower="y + ybar + 1",
        upper=repr(float(cbar)),
        terminal="-1",
        lipschitz=dict(cf=0.0, gamma1=1.0, gamma2=1.0, beta1=0.0, beta2=0.0),
        p=2,
    )


@dataclass
class CounterexampleRow:
    m: int
    expectations: np.ndarray  # E[Y^{0,m}_t] per level
    violation: float  # max over t < 1 of (E[Y_t] + 1)^+
    bound_slack: float  # min over levels of E[Y_t] + t


@dataclass
class CounterexampleReport:
    times: np.ndarray
    rows: list
    lower_bound_holds: bool
    plain_exact_error: float | None  # max |E[Y_t] + t| for m = 0
    violation_persists: bool
    violation_floor: float

    @property
    def passed(self) -> bool:
        exact = self.plain_exact_error is None or self.plain_exact_error <= 1e-12
        return self.lower_bound_holds and exact and self.violation_persists


def counterexample_run(
    lat: Lattice, m_schedule=None, cbar: float = COUNTEREXAMPLE_CBAR, violation_floor: float = 0.5
) -> CounterexampleReport:
    """Run the n = 0 row of the cascade on the no-solution example.

    Certifies ``E[Y_t] >= -t`` at every level and that the expected
    constraint ``E[Y_t] <= -1`` stays violated by at least
    ``violation_floor`` for every m.
    """
    if abs(lat.horizon - 1.0) > 1e-15:
        raise ValueError(f"the counterexample lives on T = 1, got T = {lat.horizon}")
    m_schedule = _check_schedule(m_schedule if m_schedule is not None else doubling_schedule(4096), "m")
    spec = counterexample_spec(cbar)
    _, report = cascade(spec, lat, [0], m_schedule, tol=None)
    times = lat.times
    rows = []
    interior = times < 1.0
    for j, m in enumerate(m_schedule):
        ex = (lat.node_weights * report.history[(0, j)]).sum(axis=1)
        rows.append(
            CounterexampleRow(
                m=m,
                expectations=ex,
                violation=float(np.max(np.maximum(ex[interior] + 1.0, 0.0))),
                bound_slack=float(np.min(ex + times)),
            )
        )
    plain = next((r for r in rows if r.m == 0), None)
    return CounterexampleReport(
        times=times,
        rows=rows,
        lower_bound_holds=all(r.bound_slack >= -1e-9 for r in rows),
        plain_exact_error=float(np.max(np.abs(plain.expectations + times))) if plain else None,
        violation_persists=all(r.violation >= violation_floor for r in rows),
        violation_floor=violation_floor,
    )
