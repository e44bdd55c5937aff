"""Recombining binomial lattice for a one-dimensional Brownian motion.

Node ``(k, j)`` sits at time ``t_k = k * dt`` and carries the Brownian value
``(2j - k) * sqrt(dt)``; ``j`` counts up-moves.  Every step moves by
``+/- sqrt(dt)`` with probability one half, so conditional expectations are
exact two-point averages.

Processes are stored densely as ``(N + 1, N + 1)`` arrays; row ``k`` holds the
level-``k`` values in columns ``0..k`` and zeros elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SP_NORM_PATH_CAP = 20


@dataclass(frozen=True)
class Lattice:
    """Binomial approximation of Brownian motion on ``[0, horizon]``."""

    horizon: float
    steps: int

    def __post_init__(self):
        if not (isinstance(self.steps, (int, np.integer)) and self.steps >= 1):
            raise ValueError(f"steps must be a positive integer, got {self.steps!r}")
        if not (math.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon!r}")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.dt)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.steps + 1, self.steps + 1)

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt

    def brownian(self, k: int) -> np.ndarray:
        """Brownian values at level ``k``, ordered by ``j``."""
        self._check_level(k)
        return (2.0 * np.arange(k + 1) - k) * self.sqrt_dt

    @cached_property
    def _weights(self) -> tuple[np.ndarray, ...]:
        levels = [np.ones(1)]
        for _ in range(self.steps):
            w = levels[-1]
            nxt = np.zeros(w.size + 1)
            nxt[:-1] += 0.5 * w
            nxt[1:] += 0.5 * w
            levels.append(nxt)
        for w in levels:
            w.setflags(write=False)
        return tuple(levels)

    def weights(self, k: int) -> np.ndarray:
        """Binomial probabilities ``C(k, j) 2^-k`` of the level-``k`` nodes."""
        self._check_level(k)
        return self._weights[k]

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Dense array of node probabilities (zeros off the triangle)."""
        out = np.zeros(self.shape)
        for k, w in enumerate(self._weights):
            out[k, : k + 1] = w
        return out

    @cached_property
    def brownian_grid(self) -> np.ndarray:
        out = np.zeros(self.shape)
        for k in range(self.steps + 1):
            out[k, : k + 1] = self.brownian(k)
        return out

    @cached_property
    def time_grid(self) -> np.ndarray:
        return np.broadcast_to(self.times[:, None], self.shape).copy()

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean array marking the nodes ``j <= k``."""
        return np.tril(np.ones(self.shape, dtype=bool))

    def nodes(self):
        for k in range(self.steps + 1):
            for j in range(k + 1):
                yield k, j

    def _check_level(self, k: int):
        if not 0 <= k <= self.steps:
            raise IndexError(f"level {k} outside 0..{self.steps}")


def build_lattice(horizon: float, steps: int) -> Lattice:
    return Lattice(float(horizon), int(steps))


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """Real values attached to every node of a lattice.

    The array is made read-only on construction; arithmetic returns new
    processes.
    """

    lattice: Lattice
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != self.lattice.shape:
            raise ValueError(
                f"values have shape {values.shape}, lattice needs {self.lattice.shape}"
            )
        values[~self.lattice.mask] = 0.0
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, lattice: Lattice) -> AdaptedProcess:
        return cls(lattice, np.zeros(lattice.shape))

    @classmethod
    def constant(cls, lattice: Lattice, c: float) -> AdaptedProcess:
        return cls(lattice, np.full(lattice.shape, float(c)))

    @classmethod
    def from_levels(cls, lattice: Lattice, levels) -> AdaptedProcess:
        out = np.zeros(lattice.shape)
        for k, row in enumerate(levels):
            out[k, : k + 1] = row
        return cls(lattice, out)

    @classmethod
    def from_function(cls, lattice: Lattice, fn) -> AdaptedProcess:
        """Build from ``fn(t, b)`` evaluated on the whole grid at once."""
        vals = np.broadcast_to(fn(lattice.time_grid, lattice.brownian_grid), lattice.shape)
        return cls(lattice, vals)

    def level(self, k: int) -> np.ndarray:
        self.lattice._check_level(k)
        return self.values[k, : k + 1]

    def __getitem__(self, node):
        k, j = node
        if not 0 <= j <= k <= self.lattice.steps:
            raise IndexError(f"node {node} not on the lattice")
        return float(self.values[k, j])

    def _coerce(self, other):
        if isinstance(other, AdaptedProcess):
            if other.lattice != self.lattice:
                raise ValueError("processes live on different lattices")
            return other.values
        return other

    def __add__(self, other):
        return AdaptedProcess(self.lattice, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return AdaptedProcess(self.lattice, self.values - self._coerce(other))

    def __rsub__(self, other):
        return AdaptedProcess(self.lattice, self._coerce(other) - self.values)

    def __mul__(self, other):
        return AdaptedProcess(self.lattice, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return AdaptedProcess(self.lattice, -self.values)

    def __abs__(self):
        return AdaptedProcess(self.lattice, np.abs(self.values))

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values[self.lattice.mask])))

    def expectations(self) -> np.ndarray:
        """Vector of ``E[p_k]`` for ``k = 0..N``."""
        return np.sum(self.values * self.lattice.node_weights, axis=1)


def cond_exp_next(next_values: np.ndarray) -> np.ndarray:
    """Two-point average mapping level-(k+1) values to level k."""
    next_values = np.asarray(next_values, dtype=float)
    return 0.5 * (next_values[1:] + next_values[:-1])


def conditional_expectation(p: AdaptedProcess, k: int) -> np.ndarray:
    """``E[p_{k+1} | F_k]`` as level-``k`` values."""
    if not 0 <= k < p.lattice.steps:
        raise IndexError(f"conditional expectation needs 0 <= k < {p.lattice.steps}, got {k}")
    return cond_exp_next(p.level(k + 1))


def expectation(p: AdaptedProcess, k: int) -> float:
    return float(np.dot(p.lattice.weights(k), p.level(k)))


def martingale_increment(next_values: np.ndarray, dt: float) -> np.ndarray:
    """Integrand ``Z_k`` of the one-step martingale representation.

    For level-(k+1) values ``v``: ``v = E[v | F_k] + Z_k * dB`` with
    ``dB = +/- sqrt(dt)``.
    """
    next_values = np.asarray(next_values, dtype=float)
    return (next_values[1:] - next_values[:-1]) / (2.0 * math.sqrt(dt))


def d_norm(p: AdaptedProcess, start: int = 0, stop: int | None = None) -> float:
    """Supremum over stopping times in ``[start, stop]`` of ``E|p_tau|``.

    Computed as the root value of the Snell envelope of ``|p|``.
    """
    lat = p.lattice
    stop = lat.steps if stop is None else stop
    if not 0 <= start <= stop <= lat.steps:
        raise ValueError(f"bad window [{start}, {stop}]")
    env = np.abs(p.level(stop))
    for k in range(stop - 1, -1, -1):
        env = cond_exp_next(env)
        if k >= start:
            env = np.maximum(np.abs(p.level(k)), env)
    return float(env[0])


def sp_norm(
    p: AdaptedProcess,
    q: float = 1.0,
    start: int = 0,
    stop: int | None = None,
    cap: int = SP_NORM_PATH_CAP,
) -> float:
    """``E[max_{start<=k<=stop} |p_k|^q]`` by exhaustive path enumeration.

    The running maximum is path dependent, so the lattice cannot be
    recombined; all ``2^stop`` paths are carried forward level by level.
    Note the result is not raised to ``1/q``.
    """
    lat = p.lattice
    stop = lat.steps if stop is None else stop
    if q < 1:
        raise ValueError(f"exponent must be >= 1, got {q}")
    if not 0 <= start <= stop <= lat.steps:
        raise ValueError(f"bad window [{start}, {stop}]")
    if stop > cap:
        raise ValueError(
            f"sp_norm enumerates 2^{stop} paths, above the cap 2^{cap}; use d_norm instead"
        )
    absvals = np.abs(p.values)
    j = np.zeros(1, dtype=np.int64)
    running = np.full(1, absvals[0, 0] if start == 0 else 0.0)
    for k in range(1, stop + 1):
        j = np.concatenate([j, j + 1])
        running = np.concatenate([running, running])
        if k >= start:
            running = np.maximum(running, absvals[k, j])
    return float(np.mean(running**q))


def sp_root_norm(p: AdaptedProcess, q: float, start: int = 0, stop: int | None = None) -> float:
    """The S^q norm itself, ``(E max |p|^q)^(1/q)``."""
    return sp_norm(p, q, start, stop) ** (1.0 / q)
