"""Contraction constants, window sizes and the Mokobodski falsification check."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import Lattice
from .model import Lipschitz, MokobodskiWitness, ProblemSpec

DEFAULT_TARGET = 0.99
BISECTION_TOL = 1e-12


def lambda_contraction(lip: Lipschitz, p: float, delta: float) -> float:
    """Contraction constant of the game operator in the S^p norm on a window of length delta.

    (2 d Cf + g1 + g2 + b1 + b2)^((p-1)/p) * [(p/(p-1))^p (d Cf + g1 + b1) + (d Cf + g2 + b2)]^(1/p)
    """
    if not p > 1:
        raise ValueError(f"lambda_contraction needs p > 1, got {p}")
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    dc = delta * lip.cf
    total = 2 * dc + lip.barrier_sum
    doob = (p / (p - 1)) ** p
    inner = doob * (dc + lip.gamma1 + lip.beta1) + (dc + lip.gamma2 + lip.beta2)
    return total ** ((p - 1) / p) * inner ** (1 / p)


def sigma_contraction(lip: Lipschitz, delta: float) -> float:
    """Contraction constant in the sup-over-stopping-times norm (integrable case)."""
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    return 2 * delta * lip.cf + lip.beta1 + lip.beta2 + lip.gamma1 + lip.gamma2


def contraction_constant(lip: Lipschitz, p: float, delta: float) -> float:
    """Lambda for p > 1, Sigma for p = 1."""
    return sigma_contraction(lip, delta) if p == 1 else lambda_contraction(lip, p, delta)


def find_delta(lip: Lipschitz, p: float, horizon: float, target: float = DEFAULT_TARGET) -> float | None:
    """Largest window length in ``[0, horizon]`` whose contraction constant is <= target.

    Returns None when even ``delta = 0`` exceeds the target.  The constant
    is non-decreasing in delta, so bisection applies.
    """
    if not 0 < target < 1:
        raise ValueError(f"target must lie in (0, 1), got {target}")
    const = lambda d: contraction_constant(lip, p, d)  # noqa: E731
    if const(0.0) > target:
        return None
    if const(horizon) <= target:
        return float(horizon)
    lo, hi = 0.0, float(horizon)
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if const(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class ContractionReport:
    lambda_at_zero: float | None
    sigma_at_zero: float
    cd1_holds: bool | None
    cd_p1_holds: bool
    delta_p: float | None
    delta_1: float | None
    target: float

    def holds_for(self, p: float) -> bool:
        return self.cd_p1_holds if p == 1 else bool(self.cd1_holds)

    def delta_for(self, p: float) -> float | None:
        return self.delta_1 if p == 1 else self.delta_p


def contraction_report(lip: Lipschitz, p: float, horizon: float, target: float = DEFAULT_TARGET) -> ContractionReport:
    """Both regimes at once; the S^p quantities are None when p == 1."""
    sig0 = sigma_contraction(lip, 0.0)
    if p > 1:
        lam0 = lambda_contraction(lip, p, 0.0)
        cd1 = lam0 < 1
        delta_p = find_delta(lip, p, horizon, target)
    else:
        lam0 = cd1 = delta_p = None
    return ContractionReport(
        lambda_at_zero=lam0,
        sigma_at_zero=sig0,
        cd1_holds=cd1,
        cd_p1_holds=sig0 < 1,
        delta_p=delta_p,
        delta_1=find_delta(lip, 1, horizon, target),
        target=target,
    )


class WitnessError(ValueError):
    """The witness does not assemble into a lattice semimartingale."""


@dataclass
class MokobodskiReport:
    passed: bool
    lower_margin: float  # min over nodes and grid of X - h
    upper_margin: float  # min over nodes and grid of g - X
    vplus_monotone: bool
    vminus_monotone: bool
    decomposition_error: float
    worst_lower: tuple | None
    worst_upper: tuple | None
    note: str = (
        "finite-grid check: a failure falsifies the condition, a pass does not prove it "
        "for all (y, ybar)"
    )


def assemble_witness(witness: MokobodskiWitness, lat: Lattice, tol: float = 1e-9):
    """Build ``X`` on the lattice from the witness decomposition.

    ``X(k+1, .)`` is reached from both parents; the two routes must agree,
    otherwise the witness is not a node function and WitnessError is raised.
    Returns ``(X, V+, V-, decomposition_error)`` as dense arrays.
    """
    t, b = lat.time_grid, lat.brownian_grid
    env = dict(t=t, b=b)
    J = np.broadcast_to(np.asarray(witness.integrand.evaluate(env), float), lat.shape)
    vp = np.broadcast_to(np.asarray(witness.vplus.evaluate(env), float), lat.shape)
    vm = np.broadcast_to(np.asarray(witness.vminus.evaluate(env), float), lat.shape)
    V = vp - vm
    X = np.zeros(lat.shape)
    # V+ and V- contribute through their increments, so X(0, 0) = x0
    X[0, 0] = witness.x0
    err = 0.0
    sq = lat.sqrt_dt
    for k in range(lat.steps):
        x, j_, v = X[k, : k + 1], J[k, : k + 1], V[k, : k + 1]
        vnext = V[k + 1, : k + 2]
        from_down = x - j_ * sq + (vnext[:-1] - v)  # parent (k, j) -> child (k+1, j)
        from_up = x + j_ * sq + (vnext[1:] - v)  # parent (k, j) -> child (k+1, j+1)
        nxt = np.empty(k + 2)
        nxt[0] = from_down[0]
        nxt[-1] = from_up[-1]
        if k >= 1:
            mismatch = np.abs(from_up[:-1] - from_down[1:])
            err = max(err, float(mismatch.max()))
            nxt[1:-1] = 0.5 * (from_up[:-1] + from_down[1:])
        X[k + 1, : k + 2] = nxt
    if err > tol:
        raise WitnessError(
            f"witness decomposition does not recombine on the lattice (mismatch {err:.3g} > {tol:g})"
        )
    return X, vp, vm, err


def _monotone_on_edges(V: np.ndarray, lat: Lattice) -> bool:
    for k in range(lat.steps):
        v = V[k, : k + 1]
        nxt = V[k + 1, : k + 2]
        if np.any(nxt[:-1] < v - 1e-12) or np.any(nxt[1:] < v - 1e-12):
            return False
    return True


def mokobodski_check(
    spec: ProblemSpec,
    witness: MokobodskiWitness,
    lat: Lattice,
    box=(-5.0, 5.0),
    points: int = 41,
    corner_scale: float = 10.0,
) -> MokobodskiReport:
    """Falsification check of ``h(t, y, ybar) <= X_t <= g(t, y, ybar)``.

    The inequality is probed at every node for a tensor grid over ``box``
    plus the box corners scaled by ``corner_scale`` (to expose unbounded
    barrier growth).  Monotonicity of V+ and V- is checked on every edge,
    which covers every path.
    """
    X, vp, vm, err = assemble_witness(witness, lat)
    axis = np.linspace(box[0], box[1], points)
    yy, yb = (a.ravel() for a in np.meshgrid(axis, axis, indexing="ij"))
    corners = corner_scale * np.array([[box[0], box[0]], [box[0], box[1]], [box[1], box[0]], [box[1], box[1]]])
    yy = np.concatenate([yy, corners[:, 0]])
    yb = np.concatenate([yb, corners[:, 1]])
    low_best, up_best = (math.inf, None), (math.inf, None)
    for k in range(lat.steps + 1):
        b = lat.brownian(k)
        x = X[k, : k + 1]
        B = np.repeat(b, yy.size)
        XX = np.repeat(x, yy.size)
        Y = np.tile(yy, b.size)
        YB = np.tile(yb, b.size)
        t = lat.time(k)
        low = XX - spec.h(t, B, Y, YB)
        up = spec.g(t, B, Y, YB) - XX
        i, m = int(np.argmin(low)), int(np.argmin(up))
        if low[i] < low_best[0]:
            low_best = (float(low[i]), (k, i // yy.size, float(Y[i]), float(YB[i])))
        if up[m] < up_best[0]:
            up_best = (float(up[m]), (k, m // yy.size, float(Y[m]), float(YB[m])))
    vp_ok = _monotone_on_edges(vp, lat)
    vm_ok = _monotone_on_edges(vm, lat)
    passed = low_best[0] >= 0 and up_best[0] >= 0 and vp_ok and vm_ok
    return MokobodskiReport(
        passed=passed,
        lower_margin=low_best[0],
        upper_margin=up_best[0],
        vplus_monotone=vp_ok,
        vminus_monotone=vm_ok,
        decomposition_error=err,
        worst_lower=low_best[1],
        worst_upper=up_best[1],
    )
