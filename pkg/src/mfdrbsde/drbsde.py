"""Doubly reflected BSDE with frozen coefficients on the binomial lattice.

Given a driver process, two barriers and terminal values, the backward
induction

    Y_N = terminal
    Y_k = clamp(E[Y_{k+1} | F_k] + driver_k dt, L_k, U_k)

is the value of the zero-sum Dynkin game in which the maximiser stopping
first collects ``L`` and the minimiser stopping first pays ``U``.  The push
``dK+ = (L - pre)^+`` and ``dK- = (pre - U)^+`` is booked at the node where
the clamp acts.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lattice import AdaptedProcess, Lattice, cond_exp_next, martingale_increment

ORACLE_STEP_CAP = 4


class FrozenDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FrozenData:
    """A concrete reflected problem on levels ``start..stop`` of a lattice.

    ``terminal`` holds the level-``stop`` values; driver and barriers are
    read on ``start..stop-1`` (and the barriers at ``stop`` for the
    compatibility check).  Infinite barriers are allowed as sentinels.
    """

    driver: AdaptedProcess
    lower: AdaptedProcess
    upper: AdaptedProcess
    terminal: np.ndarray
    start: int = 0
    stop: int | None = None

    def __post_init__(self):
        lat = self.driver.lattice
        stop = lat.steps if self.stop is None else self.stop
        object.__setattr__(self, "stop", stop)
        if not 0 <= self.start < stop <= lat.steps:
            raise FrozenDataError(f"bad window [{self.start}, {stop}] for {lat.steps} steps")
        term = np.asarray(self.terminal, dtype=float)
        if term.shape != (stop + 1,):
            raise FrozenDataError(f"terminal needs {stop + 1} values, got shape {term.shape}")
        object.__setattr__(self, "terminal", term)

    @property
    def lattice(self) -> Lattice:
        return self.driver.lattice

    def validate(self, compat_tol: float = 0.0):
        """Raise FrozenDataError unless L < U in the window and L <= terminal <= U."""
        for k in range(self.start, self.stop + 1):
            lo, hi = self.lower.level(k), self.upper.level(k)
            if not np.all(lo < hi):
                j = int(np.argmin(hi - lo))
                raise FrozenDataError(
                    f"barriers not strictly separated at node ({k}, {j}): L={lo[j]!r}, U={hi[j]!r}"
                )
        lo, hi = self.lower.level(self.stop), self.upper.level(self.stop)
        bad = (self.terminal < lo - compat_tol) | (self.terminal > hi + compat_tol)
        if np.any(bad):
            j = int(np.nonzero(bad)[0][0])
            raise FrozenDataError(
                f"terminal value {self.terminal[j]!r} at node ({self.stop}, {j}) "
                f"outside [{lo[j]!r}, {hi[j]!r}]"
            )


@dataclass(eq=False)
class DRSolution:
    """Solution quadruple with diagnostics.

    ``dKplus``/``dKminus`` are the exact node-wise pushes.  ``Kplus``/``Kminus``
    are cumulative node processes: on a recombining lattice the running sum
    of pushes depends on the path, so the node value is the largest sum over
    the paths reaching that node (zero at the root, non-decreasing along
    every path, exact whenever the pushes do not depend on the path).
    """

    Y: AdaptedProcess
    Z: AdaptedProcess
    dKplus: AdaptedProcess
    dKminus: AdaptedProcess
    Kplus: AdaptedProcess
    Kminus: AdaptedProcess
    skorokhod_plus: float
    skorokhod_minus: float
    flat_off_barrier: float
    start: int = 0
    stop: int | None = None

    @property
    def lattice(self) -> Lattice:
        return self.Y.lattice

    @property
    def value(self) -> float:
        return self.Y[self.start, 0] if self.start == 0 else float("nan")


def cumulate_pushes(dK: np.ndarray, lat: Lattice, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Path-maximal running sum of pushes; ``K`` is zero up to level ``start``."""
    stop = lat.steps if stop is None else stop
    K = np.zeros(lat.shape)
    for k in range(start, stop):
        reach = K[k, : k + 1] + dK[k, : k + 1]
        nxt = np.empty(k + 2)
        nxt[0] = reach[0]
        nxt[-1] = reach[-1]
        nxt[1:-1] = np.maximum(reach[:-1], reach[1:])
        K[k + 1, : k + 2] = nxt
    return K


def solve_reflected(fd: FrozenData, lat: Lattice | None = None, validate: bool = True, compat_tol: float = 0.0) -> DRSolution:
    """Backward induction with two-sided clamping on the window of ``fd``."""
    lat = fd.lattice if lat is None else lat
    if lat != fd.lattice:
        raise FrozenDataError("frozen data built on a different lattice")
    if validate:
        fd.validate(compat_tol)
    dt = lat.dt
    Y = np.zeros(lat.shape)
    Z = np.zeros(lat.shape)
    dKp = np.zeros(lat.shape)
    dKm = np.zeros(lat.shape)
    Y[fd.stop, : fd.stop + 1] = fd.terminal
    phi, L, U = fd.driver.values, fd.lower.values, fd.upper.values
    for k in range(fd.stop - 1, fd.start - 1, -1):
        nxt = Y[k + 1, : k + 2]
        pre = cond_exp_next(nxt) + phi[k, : k + 1] * dt
        lo, hi = L[k, : k + 1], U[k, : k + 1]
        Y[k, : k + 1] = np.minimum(np.maximum(pre, lo), hi)
        dKp[k, : k + 1] = np.maximum(lo - pre, 0.0)
        dKm[k, : k + 1] = np.maximum(pre - hi, 0.0)
        Z[k, : k + 1] = martingale_increment(nxt, dt)
    sol = DRSolution(
        Y=AdaptedProcess(lat, Y),
        Z=AdaptedProcess(lat, Z),
        dKplus=AdaptedProcess(lat, dKp),
        dKminus=AdaptedProcess(lat, dKm),
        Kplus=AdaptedProcess(lat, cumulate_pushes(dKp, lat, fd.start, fd.stop)),
        Kminus=AdaptedProcess(lat, cumulate_pushes(dKm, lat, fd.start, fd.stop)),
        skorokhod_plus=0.0,
        skorokhod_minus=0.0,
        flat_off_barrier=0.0,
        start=fd.start,
        stop=fd.stop,
    )
    attach_diagnostics(sol, fd)
    return sol


def attach_diagnostics(sol: DRSolution, fd: FrozenData) -> DRSolution:
    sol.skorokhod_plus, sol.skorokhod_minus = skorokhod_residuals(sol, fd)
    sol.flat_off_barrier = flat_off_barrier(sol, fd)
    return sol


def _window_mask(lat: Lattice, start: int, stop: int) -> np.ndarray:
    mask = lat.mask.copy()
    mask[:start] = False
    mask[stop:] = False  # pushes live on start..stop-1
    return mask


def skorokhod_residuals(sol: DRSolution, fd: FrozenData) -> tuple[float, float]:
    """Weighted sums of ``(Y - L) dK+`` and ``(U - Y) dK-`` over the window."""
    lat = sol.lattice
    if fd.lattice != lat:
        raise FrozenDataError("solution and frozen data live on different lattices")
    mask = _window_mask(lat, fd.start, fd.stop)
    w = lat.node_weights
    dKp, dKm = sol.dKplus.values, sol.dKminus.values
    with np.errstate(invalid="ignore"):
        # an infinite barrier never pushes, so 0 * inf counts as 0
        plus = np.where(dKp != 0, (sol.Y.values - fd.lower.values) * dKp, 0.0)
        minus = np.where(dKm != 0, (fd.upper.values - sol.Y.values) * dKm, 0.0)
    return float(np.sum((w * plus)[mask])), float(np.sum((w * minus)[mask]))


def flat_off_barrier(sol: DRSolution, fd: FrozenData) -> float:
    """Largest push at nodes where Y lies strictly between the barriers."""
    mask = _window_mask(sol.lattice, fd.start, fd.stop)
    Y = sol.Y.values
    inside = mask & (Y > fd.lower.values) & (Y < fd.upper.values)
    pushes = np.maximum(sol.dKplus.values, sol.dKminus.values)
    return float(pushes[inside].max()) if np.any(inside) else 0.0


# ---------------------------------------------------------------------------
# brute-force Dynkin game


@lru_cache(maxsize=None)
def stopping_times(depth: int) -> np.ndarray:
    """Every stopping time of a binary tree of the given depth.

    Paths are indexed so that the first move splits the index range in
    halves (lower half = down move).  Row ``i`` gives the stopping level on
    each of the ``2^depth`` paths.  Counts: 1, 2, 5, 26, 677, ...
    """
    if depth == 0:
        return np.zeros((1, 1), dtype=np.int64)
    sub = stopping_times(depth - 1)
    width = sub.shape[1]
    rows = [np.zeros((1, 2 * width), dtype=np.int64)]
    a, b = np.meshgrid(np.arange(len(sub)), np.arange(len(sub)), indexing="ij")
    rows.append(np.concatenate([sub[a.ravel()] + 1, sub[b.ravel()] + 1], axis=1))
    out = np.concatenate(rows)
    out.setflags(write=False)
    return out


def _path_nodes(N: int) -> np.ndarray:
    """``j`` index at each level for every path (first move = most significant bit)."""
    paths = np.arange(2**N)
    j = np.zeros((2**N, N + 1), dtype=np.int64)
    for k in range(1, N + 1):
        up = (paths >> (N - k)) & 1
        j[:, k] = j[:, k - 1] + up
    return j


def dynkin_value_bruteforce(
    fd: FrozenData, lat: Lattice | None = None, validate: bool = True
) -> tuple[float, float]:
    """Sup-inf and inf-sup of the root game value over all pure stopping times.

    Payoff per path: ``sum_{k < min(tau, sigma)} driver_k dt`` plus
    ``U_sigma`` if ``sigma < tau``, ``L_tau`` if ``tau <= sigma`` and
    ``tau < T``, and the terminal value if both stop at ``T``.  The tie
    ``tau == sigma < T`` goes to the maximiser's barrier.  Only small
    lattices are accepted.  ``validate=False`` skips the separation and
    terminal compatibility checks (the payoff is defined regardless).
    """
    lat = fd.lattice if lat is None else lat
    N = lat.steps
    if N > ORACLE_STEP_CAP:
        raise ValueError(f"brute-force enumeration needs N <= {ORACLE_STEP_CAP}, got {N}")
    if fd.start != 0 or fd.stop != N:
        raise ValueError("brute-force oracle works on the full lattice only")
    if validate:
        fd.validate()
    J = _path_nodes(N)
    levels = np.arange(N + 1)
    P = J.shape[0]
    phi = fd.driver.values[levels, J]  # (P, N+1)
    L = fd.lower.values[levels, J]
    U = fd.upper.values[levels, J]
    xi = fd.terminal[J[:, N]]
    run = np.concatenate([np.zeros((P, 1)), np.cumsum(phi[:, :N] * lat.dt, axis=1)], axis=1)

    taus = stopping_times(N)  # (S, P)
    rows = np.arange(P)
    payoff = np.empty((len(taus), len(taus)))
    for a, tau in enumerate(taus):
        sig = taus
        first = np.minimum(tau[None, :], sig)
        val = run[rows, first]
        L_tau = L[rows, tau]
        val = val + np.where(sig < tau[None, :], U[rows[None, :], sig], 0.0)
        val = val + np.where((tau[None, :] <= sig) & (tau[None, :] < N), L_tau[None, :], 0.0)
        val = val + np.where((tau[None, :] == N) & (sig == N), xi[None, :], 0.0)
        payoff[a] = val.mean(axis=1)
    supinf = float(np.max(np.min(payoff, axis=1)))
    infsup = float(np.min(np.max(payoff, axis=0)))
    return supinf, infsup


def random_frozen_data(lat: Lattice, rng: np.random.Generator) -> FrozenData:
    """Random instance with ``L < U`` everywhere and a compatible terminal."""
    shape = lat.shape
    phi = rng.normal(0.0, 1.0, shape)
    centre = rng.normal(0.0, 1.0, shape)
    low_gap = rng.exponential(0.5, shape) + 1e-3
    up_gap = rng.exponential(0.5, shape) + 1e-3
    L = centre - low_gap
    U = centre + up_gap
    N = lat.steps
    u = rng.uniform(0.0, 1.0, N + 1)
    term = L[N, : N + 1] + u * (U[N, : N + 1] - L[N, : N + 1])
    return FrozenData(
        AdaptedProcess(lat, phi), AdaptedProcess(lat, L), AdaptedProcess(lat, U), term
    )
