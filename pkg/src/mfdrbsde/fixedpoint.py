"""Picard iteration of the frozen-coefficient game operator.

``Phi(Y)`` freezes driver and barriers along ``(Y, E[Y])`` and returns the
backward-induction solution of the resulting reflected problem.  The fixed
point is found window by window, backward from ``T``; each window is short
enough for ``Phi`` to contract, and its left edge becomes the terminal data
of the next window.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .conditions import DEFAULT_TARGET, ContractionReport, contraction_report
from .drbsde import DRSolution, FrozenData, attach_diagnostics, cumulate_pushes, solve_reflected
from .lattice import SP_NORM_PATH_CAP, AdaptedProcess, Lattice, d_norm, sp_root_norm
from .model import ProblemSpec
from .penalization import solve_mean_field_bsde

NORMS = ("auto", "d", "sp")
MODES = ("global", "windowed")


class ContractionConditionError(RuntimeError):
    """The sufficient contraction condition fails and no override was given."""


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


@dataclass
class PicardConfig:
    """Iteration settings.  ``delta=None`` picks the window from the contraction target."""

    mode: str = "windowed"
    delta: float | None = None
    tol: float = 1e-8
    max_iter: int = 500
    norm: str = "auto"
    target: float = DEFAULT_TARGET
    force: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")


@dataclass(eq=False)
class FixedPointResult:
    solution: DRSolution
    frozen: FrozenData  # data used by the final pass, spliced over all windows
    windows: list  # (k0, k1) from T backward
    iterations: list  # per window: updates before the confirming pass
    residuals: list  # per window: residual after every pass
    contraction_ratios: list  # per window: successive residual ratios
    final_residual: float
    norm: str
    delta: float
    condition: ContractionReport
    warnings: list = field(default_factory=list)


def resolve_norm(norm: str, p: float, stop: int) -> str:
    if norm == "auto":
        return "sp" if p > 1 and stop <= SP_NORM_PATH_CAP else "d"
    return norm


def window_norm(diff: AdaptedProcess, kind: str, p: float, start: int, stop: int) -> float:
    if kind == "sp":
        return sp_root_norm(diff, max(p, 1.0), start, stop)
    return d_norm(diff, start, stop)


def window_steps(delta: float, lat: Lattice) -> int:
    """Whole number of lattice steps in a window of length ``delta`` (at least 1)."""
    return max(1, min(lat.steps, int(math.floor(delta / lat.dt + 1e-9))))


def freeze(
    spec: ProblemSpec,
    lat: Lattice,
    Y: AdaptedProcess,
    window: tuple[int, int] | None = None,
    mean_field: bool = True,
) -> FrozenData:
    """Frozen data of ``Phi(Y)`` on levels ``k0..k1``.

    The terminal is ``xi`` when ``k1 = N`` and ``Y`` at level ``k1``
    otherwise.  ``mean_field=False`` evaluates the coefficients with the
    expectation argument set to zero.
    """
    spec.require_z_free()
    k0, k1 = (0, lat.steps) if window is None else window
    t, b = lat.time_grid, lat.brownian_grid
    ybar = Y.expectations()[:, None] if mean_field else np.zeros((lat.steps + 1, 1))
    Yv = Y.values
    phi = spec.f(t, b, Yv, ybar)
    L = spec.h(t, b, Yv, ybar)
    U = spec.g(t, b, Yv, ybar)
    terminal = spec.terminal_values(lat) if k1 == lat.steps else Y.level(k1)
    return FrozenData(
        AdaptedProcess(lat, phi),
        AdaptedProcess(lat, L),
        AdaptedProcess(lat, U),
        np.array(terminal, dtype=float),
        start=k0,
        stop=k1,
    )


def _splice(base: np.ndarray, new: np.ndarray, k0: int, k1: int) -> np.ndarray:
    out = base.copy()
    out[k0 : k1 + 1] = new[k0 : k1 + 1]
    return out


def apply_phi(spec, lat, Y: AdaptedProcess, window, compat_tol: float = 1e-9, mean_field: bool = True):
    """One pass of ``Phi`` on a window; returns ``(new Y, solution, frozen data)``."""
    fd = freeze(spec, lat, Y, window, mean_field)
    sol = solve_reflected(fd, lat, compat_tol=compat_tol)
    k0, k1 = window
    return AdaptedProcess(lat, _splice(Y.values, sol.Y.values, k0, k1)), sol, fd


def check_condition(spec: ProblemSpec, lat: Lattice, cfg: PicardConfig) -> ContractionReport:
    report = contraction_report(spec.lipschitz, spec.p, lat.horizon, cfg.target)
    if not report.holds_for(spec.p):
        const = report.sigma_at_zero if spec.p == 1 else report.lambda_at_zero
        msg = f"contraction condition fails: constant at delta = 0 is {const:.6g} >= 1"
        if not cfg.force:
            raise ContractionConditionError(msg)
        warnings.warn(msg + " (continuing under force)", RuntimeWarning, stacklevel=3)
    return report


def picard_solve(spec: ProblemSpec, lat: Lattice, cfg: PicardConfig | None = None) -> FixedPointResult:
    """Fixed point of ``Phi`` starting from the unreflected mean-field BSDE."""
    cfg = cfg or PicardConfig()
    spec.require_z_free()
    report = check_condition(spec, lat, cfg)
    notes = []
    N = lat.steps
    if cfg.mode == "global":
        steps, delta = N, lat.horizon
    else:
        delta = cfg.delta if cfg.delta is not None else report.delta_for(spec.p)
        if delta is None:
            delta = lat.dt
            notes.append(f"no window meets target {cfg.target}; using one lattice step")
        delta = min(delta, lat.horizon)
        if delta < lat.dt * (1 - 1e-9):
            notes.append(f"delta {delta:.6g} is below dt {lat.dt:.6g}; using one lattice step")
        steps = window_steps(delta, lat)
    for n in notes:
        warnings.warn(n, RuntimeWarning, stacklevel=2)

    compat_tol = max(1e-9, 100 * cfg.tol)
    Y = solve_mean_field_bsde(spec, lat).Y
    kind = resolve_norm(cfg.norm, spec.p, N)
    shape = lat.shape
    Yf, Zf = np.zeros(shape), np.zeros(shape)
    dKp, dKm = np.zeros(shape), np.zeros(shape)
    phi, L, U = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    windows, iters, residuals, ratios = [], [], [], []
    k1 = N
    while k1 > 0:
        k0 = max(0, k1 - steps)
        res = []
        for it in range(cfg.max_iter):
            newY, sol, fd = apply_phi(spec, lat, Y, (k0, k1), compat_tol)
            r = window_norm(newY - Y, kind, spec.p, k0, k1)
            res.append(r)
            Y = newY
            if r <= cfg.tol:
                break
        else:
            raise ConvergenceError(
                f"window [{k0}, {k1}] not converged after {cfg.max_iter} passes (residual {res[-1]:.3g})",
                res[-1],
                cfg.max_iter,
            )
        rows = slice(k0, k1)
        Zf[rows], dKp[rows], dKm[rows] = sol.Z.values[rows], sol.dKplus.values[rows], sol.dKminus.values[rows]
        # the right edge row belongs to the window that pushed there
        top = k1 + 1 if k1 == N else k1
        phi[rows] = fd.driver.values[rows]
        L[k0:top], U[k0:top] = fd.lower.values[k0:top], fd.upper.values[k0:top]
        windows.append((k0, k1))
        iters.append(len(res) - 1)
        residuals.append(res)
        ratios.append([b / a for a, b in zip(res, res[1:]) if a > 0])
        k1 = k0
    Yf[:] = Y.values
    frozen = FrozenData(
        AdaptedProcess(lat, phi),
        AdaptedProcess(lat, L),
        AdaptedProcess(lat, U),
        spec.terminal_values(lat),
    )
    solution = DRSolution(
        Y=AdaptedProcess(lat, Yf),
        Z=AdaptedProcess(lat, Zf),
        dKplus=AdaptedProcess(lat, dKp),
        dKminus=AdaptedProcess(lat, dKm),
        Kplus=AdaptedProcess(lat, cumulate_pushes(dKp, lat)),
        Kminus=AdaptedProcess(lat, cumulate_pushes(dKm, lat)),
        skorokhod_plus=0.0,
        skorokhod_minus=0.0,
        flat_off_barrier=0.0,
    )
    attach_diagnostics(solution, frozen)
    return FixedPointResult(
        solution=solution,
        frozen=frozen,
        windows=windows,
        iterations=iters,
        residuals=residuals,
        contraction_ratios=ratios,
        final_residual=max(r[-1] for r in residuals),
        norm=kind,
        delta=steps * lat.dt,
        condition=report,
        warnings=notes,
    )


def fixed_point_residual(spec: ProblemSpec, result: FixedPointResult, norm: str | None = None) -> float:
    """``||Y - Phi(Y)||`` for one more full-horizon pass at the converged Y."""
    lat = result.solution.lattice
    Y = result.solution.Y
    kind = norm or result.norm
    newY, _, _ = apply_phi(spec, lat, Y, (0, lat.steps), compat_tol=1e-6)
    return window_norm(newY - Y, kind, spec.p, 0, lat.steps)


def solve_nodewise(
    spec: ProblemSpec, lat: Lattice, mean_field: bool = True, tol: float = 1e-15, max_iter: int = 10_000
) -> AdaptedProcess:
    """Direct backward solve of ``y = clamp(e + dt f(y, ybar), h(y, ybar), g(y, ybar))``.

    Each level is a finite-dimensional fixed point (``ybar = E[y]`` at that
    level, or 0 when ``mean_field`` is False) iterated to convergence.  This
    is an independent construction of the discrete fixed point, used as a
    reference.
    """
    spec.require_z_free()
    N, dt = lat.steps, lat.dt
    Y = np.zeros(lat.shape)
    Y[N] = spec.terminal_values(lat)
    for k in range(N - 1, -1, -1):
        t, b = lat.time(k), lat.brownian(k)
        w = lat.weights(k)
        nxt = Y[k + 1, : k + 2]
        e = 0.5 * (nxt[1:] + nxt[:-1])
        y = e.copy()
        for _ in range(max_iter):
            ybar = float(np.dot(w, y)) if mean_field else 0.0
            new = np.minimum(np.maximum(e + dt * spec.f(t, b, y, ybar), spec.h(t, b, y, ybar)), spec.g(t, b, y, ybar))
            if np.max(np.abs(new - y)) <= tol * (1 + np.max(np.abs(new))):
                y = new
                break
            y = new
        else:
            raise ConvergenceError(f"level {k} did not converge", float(np.max(np.abs(new - y))), max_iter)
        Y[k, : k + 1] = y
    return AdaptedProcess(lat, Y)


@dataclass
class ContractionTrials:
    max_ratio: float
    ratios: list
    skipped: int
    window: tuple
    norm: str


def empirical_contraction(
    spec: ProblemSpec,
    lat: Lattice,
    delta: float,
    trials: int,
    rng: np.random.Generator | int | None = 0,
    norm: str = "auto",
    scale: float = 1.0,
) -> ContractionTrials:
    """Largest observed ``||Phi(Y) - Phi(Y')|| / ||Y - Y'||`` on the last window.

    Pairs agree outside levels ``N - s .. N - 1`` (``s`` steps of the
    window) and share the terminal ``xi``.  Differences mix level shifts,
    smooth functions of ``b`` and node noise.  Pairs with ``Y = Y'`` are
    skipped.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    N = lat.steps
    s = window_steps(delta, lat)
    k0 = N - s
    kind = resolve_norm(norm, spec.p, N)
    base = solve_mean_field_bsde(spec, lat).Y.values
    b = lat.brownian_grid
    inside = np.zeros(lat.shape, dtype=bool)
    inside[k0:N] = True
    inside &= lat.mask
    ratios, skipped = [], 0
    for trial in range(trials):
        Y1 = base + scale * 0.1 * rng.normal(size=lat.shape) * inside
        kind_of_diff = trial % 4
        if kind_of_diff == 0:
            d = np.full(lat.shape, rng.normal())
        elif kind_of_diff == 1:
            d = np.repeat(rng.normal(size=(N + 1, 1)), N + 1, axis=1)
        elif kind_of_diff == 2:
            a, c = rng.normal(size=2)
            d = a * np.sin(c * b) + rng.normal() * np.cos(b)
        else:
            d = rng.normal(size=lat.shape)
        d = scale * d * inside
        Y2 = Y1 + d
        P1, P2 = AdaptedProcess(lat, Y1), AdaptedProcess(lat, Y2)
        den = window_norm(P1 - P2, kind, spec.p, k0, N)
        if den == 0:
            skipped += 1
            continue
        A, _, _ = apply_phi(spec, lat, P1, (k0, N))
        B, _, _ = apply_phi(spec, lat, P2, (k0, N))
        ratios.append(window_norm(A - B, kind, spec.p, k0, N) / den)
    return ContractionTrials(max(ratios, default=0.0), ratios, skipped, (k0, N), kind)
