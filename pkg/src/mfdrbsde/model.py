"""Problem definition: coefficients, declared constants and structural checks.

Coefficients see the randomness only through the current Brownian value
``b``; ``ybar`` stands for the expectation ``E[Y_t]`` at the same time.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .expression import Expression, ExpressionError, parse_expression
from .lattice import AdaptedProcess, Lattice

DRIVER_VARS = ("t", "b", "y", "ybar", "z")
BARRIER_VARS = ("t", "b", "y", "ybar")
TERMINAL_VARS = ("b",)
WITNESS_VARS = ("t", "b")

ROUTES = ("fixed-point", "penalization", "both")


class ModelError(ValueError):
    """Invalid problem data (schema, negative constants, forbidden variables)."""


class AssumptionError(ModelError):
    """Data violates a structural assumption required by the chosen route."""


@dataclass(frozen=True)
class Lipschitz:
    cf: float = 0.0
    gamma1: float = 0.0
    gamma2: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0

    def __post_init__(self):
        for name in ("cf", "gamma1", "gamma2", "beta1", "beta2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ModelError(f"Lipschitz constant {name} must be finite and >= 0, got {v}")

    @property
    def barrier_sum(self) -> float:
        return self.gamma1 + self.gamma2 + self.beta1 + self.beta2


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    driver: Expression
    lower: Expression
    upper: Expression
    terminal: Expression
    lipschitz: Lipschitz = field(default_factory=Lipschitz)
    p: float = 2.0

    def __post_init__(self):
        if not (math.isfinite(self.p) and self.p >= 1):
            raise ModelError(f"exponent p must be >= 1, got {self.p}")
        self.driver.check_variables(DRIVER_VARS, "driver")
        self.lower.check_variables(BARRIER_VARS, "lower barrier")
        self.upper.check_variables(BARRIER_VARS, "upper barrier")
        self.terminal.check_variables(TERMINAL_VARS, "terminal")

    @property
    def driver_uses_z(self) -> bool:
        return "z" in self.driver.variables

    @property
    def unconstrained(self) -> bool:
        """Both barriers are the infinite sentinels."""
        return self.lower.constant_value == -math.inf and self.upper.constant_value == math.inf

    def require_z_free(self):
        if self.driver_uses_z:
            raise AssumptionError(
                "the fixed-point route needs a driver that does not depend on z; "
                f"got {self.driver.source!r}"
            )

    def f(self, t, b, y, ybar, z=0.0):
        return _full(self.driver.evaluate(dict(t=t, b=b, y=y, ybar=ybar, z=z)), y)

    def f_dy(self, t, b, y, ybar, z=0.0):
        val, d = self.driver.derivative("y", dict(t=t, b=b, y=y, ybar=ybar, z=z))
        return _full(val, y), _full(d, y)

    def h(self, t, b, y, ybar):
        return _full(self.lower.evaluate(dict(t=t, b=b, y=y, ybar=ybar)), y)

    def g(self, t, b, y, ybar):
        return _full(self.upper.evaluate(dict(t=t, b=b, y=y, ybar=ybar)), y)

    def xi(self, b):
        return _full(self.terminal.evaluate(dict(b=b)), b)

    def terminal_values(self, lat: Lattice) -> np.ndarray:
        return self.xi(lat.brownian(lat.steps))

    def digest(self) -> str:
        doc = {
            "driver": self.driver.source,
            "lower": self.lower.source,
            "upper": self.upper.source,
            "terminal": self.terminal.source,
            "lipschitz": asdict(self.lipschitz),
            "p": self.p,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _full(value, like):
    return np.broadcast_to(np.asarray(value, dtype=float), np.shape(like)).astype(float)


def make_spec(
    driver="0",
    lower="-inf",
    upper="inf",
    terminal="0",
    lipschitz: Lipschitz | dict | None = None,
    p: float = 2.0,
) -> ProblemSpec:
    """Convenience constructor from expression strings."""
    if lipschitz is None:
        lipschitz = Lipschitz()
    elif isinstance(lipschitz, dict):
        lipschitz = Lipschitz(**lipschitz)
    return ProblemSpec(
        driver=parse_expression(driver, DRIVER_VARS, "driver"),
        lower=parse_expression(lower, BARRIER_VARS, "lower barrier"),
        upper=parse_expression(upper, BARRIER_VARS, "upper barrier"),
        terminal=parse_expression(terminal, TERMINAL_VARS, "terminal"),
        lipschitz=lipschitz,
        p=float(p),
    )


@dataclass(frozen=True, eq=False)
class MokobodskiWitness:
    """Candidate semimartingale ``X = x0 + sum J dB + V+ - V-`` between the barriers."""

    x0: float
    integrand: Expression
    vplus: Expression
    vminus: Expression

    def __post_init__(self):
        for name in ("integrand", "vplus", "vminus"):
            getattr(self, name).check_variables(WITNESS_VARS, f"mokobodski {name}")


# ---------------------------------------------------------------------------
# checks


@dataclass
class TerminalReport:
    passed: bool
    expected_terminal: float
    violations: list  # (j, b, xi, h, g)


def validate_terminal(spec: ProblemSpec, lat: Lattice) -> TerminalReport:
    """Check ``h(T, xi, E xi) <= xi <= g(T, xi, E xi)`` at every terminal node."""
    N = lat.steps
    b = lat.brownian(N)
    xi = spec.xi(b)
    exi = float(np.dot(lat.weights(N), xi))
    t = np.full_like(b, lat.horizon)
    lo = spec.h(t, b, xi, exi)
    hi = spec.g(t, b, xi, exi)
    bad = np.nonzero((lo > xi) | (xi > hi))[0]
    violations = [(int(j), float(b[j]), float(xi[j]), float(lo[j]), float(hi[j])) for j in bad]
    return TerminalReport(not violations, exi, violations)


@dataclass
class SeparationReport:
    passed: bool
    margin: float
    worst: tuple  # (k, j, y, ybar)


def _sample_grid(box, points):
    axis = np.linspace(box[0], box[1], points)
    return np.meshgrid(axis, axis, indexing="ij")


def check_separation(spec: ProblemSpec, lat: Lattice, box=(-5.0, 5.0), points: int = 41) -> SeparationReport:
    """Minimum of ``g - h`` over all nodes and a tensor grid of ``(y, ybar)``."""
    yy, yb = _sample_grid(box, points)
    yy, yb = yy.ravel(), yb.ravel()
    best = (math.inf, None)
    for k in range(lat.steps + 1):
        b = lat.brownian(k)
        t = lat.time(k)
        B = np.repeat(b, yy.size)
        Y = np.tile(yy, b.size)
        YB = np.tile(yb, b.size)
        gap = spec.g(t, B, Y, YB) - spec.h(t, B, Y, YB)
        # both infinite with the same sign gives nan; treat as no separation
        gap = np.where(np.isnan(gap), -math.inf, gap)
        i = int(np.argmin(gap))
        if gap[i] < best[0]:
            best = (float(gap[i]), (k, i // yy.size, float(Y[i]), float(YB[i])))
    return SeparationReport(best[0] > 0, best[0], best[1])


@dataclass
class LipschitzWarning:
    coefficient: str
    lhs: float
    bound: float
    point_a: dict
    point_b: dict

    def __str__(self):
        return (
            f"{self.coefficient}: |difference| {self.lhs:.6g} exceeds declared bound "
            f"{self.bound:.6g} between {self.point_a} and {self.point_b}"
        )


def audit_lipschitz(
    spec: ProblemSpec,
    horizon: float,
    rng: np.random.Generator,
    box=(-5.0, 5.0),
    pairs: int = 10_000,
    eps: float = 1e-9,
) -> list[LipschitzWarning]:
    """Spot-check the declared Lipschitz constants on random pairs of points.

    Returns at most one warning per coefficient (the worst violating pair).
    """
    lo, hi = box
    t = rng.uniform(0, horizon, pairs)
    b = rng.uniform(lo, hi, pairs)
    y1, y2, m1, m2, z1, z2 = (rng.uniform(lo, hi, pairs) for _ in range(6))
    lip = spec.lipschitz
    dy, dm, dz = np.abs(y1 - y2), np.abs(m1 - m2), np.abs(z1 - z2)
    with np.errstate(invalid="ignore"):
        checks = [
            ("lower", spec.h(t, b, y1, m1) - spec.h(t, b, y2, m2), (lip.gamma1 + eps) * dy + (lip.gamma2 + eps) * dm),
            ("upper", spec.g(t, b, y1, m1) - spec.g(t, b, y2, m2), (lip.beta1 + eps) * dy + (lip.beta2 + eps) * dm),
        ]
    if spec.driver_uses_z:
        df = spec.f(t, b, y1, m1, z1) - spec.f(t, b, y2, m2, z2)
        checks.append(("driver", df, (lip.cf + eps) * (dy + dm + dz)))
    else:
        df = spec.f(t, b, y1, m1) - spec.f(t, b, y2, m2)
        checks.append(("driver", df, (lip.cf + eps) * (dy + dm)))
    out = []
    for name, diff, bound in checks:
        with np.errstate(invalid="ignore"):
            excess = np.where(np.isfinite(diff), np.abs(diff) - bound, -np.inf)
        i = int(np.argmax(excess))
        if excess[i] > 0:
            out.append(
                LipschitzWarning(
                    name,
                    float(abs(diff[i])),
                    float(bound[i]),
                    dict(t=float(t[i]), b=float(b[i]), y=float(y1[i]), ybar=float(m1[i]), z=float(z1[i])),
                    dict(t=float(t[i]), b=float(b[i]), y=float(y2[i]), ybar=float(m2[i]), z=float(z2[i])),
                )
            )
    return out


@dataclass
class MonotonicityAudit:
    driver_in_y: bool
    driver_in_ybar: bool
    lower_monotone: bool
    upper_monotone: bool

    @property
    def passed(self) -> bool:
        return self.driver_in_y and self.driver_in_ybar and self.lower_monotone and self.upper_monotone


def audit_monotonicity(
    spec: ProblemSpec, horizon: float, rng: np.random.Generator, box=(-5.0, 5.0), samples: int = 10_000
) -> MonotonicityAudit:
    """Sampled check that f is non-decreasing in (y, ybar) and h, g in (y, ybar)."""
    lo, hi = box
    t = rng.uniform(0, horizon, samples)
    b, y, m, z = (rng.uniform(lo, hi, samples) for _ in range(4))
    step = rng.uniform(0, 1, samples)
    tol = -1e-12

    def nondecreasing(fn, *args_lo_hi):
        a = fn(*args_lo_hi[0])
        c = fn(*args_lo_hi[1])
        with np.errstate(invalid="ignore"):
            d = c - a
        return bool(np.all(np.isnan(d) | (d >= tol * (1 + np.abs(a)))))

    return MonotonicityAudit(
        driver_in_y=nondecreasing(spec.f, (t, b, y, m, z), (t, b, y + step, m, z)),
        driver_in_ybar=nondecreasing(spec.f, (t, b, y, m, z), (t, b, y, m + step, z)),
        lower_monotone=nondecreasing(spec.h, (t, b, y, m), (t, b, y + step, m))
        and nondecreasing(spec.h, (t, b, y, m), (t, b, y, m + step)),
        upper_monotone=nondecreasing(spec.g, (t, b, y, m), (t, b, y + step, m))
        and nondecreasing(spec.g, (t, b, y, m), (t, b, y, m + step)),
    )


def barrier_processes(spec: ProblemSpec, Y: AdaptedProcess):
    """``h`` and ``g`` evaluated along ``(Y, E[Y])`` as node arrays."""
    lat = Y.lattice
    ybar = Y.expectations()[:, None]
    t, b = lat.time_grid, lat.brownian_grid
    return spec.h(t, b, Y.values, ybar), spec.g(t, b, Y.values, ybar)


# ---------------------------------------------------------------------------
# configuration documents

_EXPR = {"type": ["string", "null"]}
_NONNEG = {"type": "number", "minimum": 0}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["driver", "lower", "upper", "terminal"],
    "additionalProperties": False,
    "properties": {
        "driver": {"type": "string"},
        "lower": _EXPR,
        "upper": _EXPR,
        "terminal": {"type": "string"},
        "lipschitz": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _NONNEG for k in ("cf", "gamma1", "gamma2", "beta1", "beta2")},
        },
        "p": {"type": "number", "minimum": 1},
        "lattice": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 1},
            },
        },
        "mokobodski": {
            "type": "object",
            "additionalProperties": False,
            "required": ["x0"],
            "properties": {
                "x0": {"type": "number"},
                "integrand": {"type": "string"},
                "vplus": {"type": "string"},
                "vminus": {"type": "string"},
            },
        },
        "route": {"enum": list(ROUTES)},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["global", "windowed"]},
                "delta": {"anyOf": [{"const": "auto"}, {"type": "number", "exclusiveMinimum": 0}]},
                "target": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "norm": {"enum": ["auto", "d", "sp"]},
                "penalty_tol": {"type": "number", "minimum": 0},
                "n_max": {"type": "integer", "minimum": 0},
                "m_max": {"type": "integer", "minimum": 0},
            },
        },
        "audit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "box": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                "pairs": {"type": "integer", "minimum": 1},
                "grid": {"type": "integer", "minimum": 2},
            },
        },
    },
}

SOLVER_DEFAULTS = {
    "mode": "windowed",
    "delta": "auto",
    "target": 0.99,
    "tol": 1e-8,
    "max_iter": 500,
    "norm": "auto",
    "penalty_tol": 1e-6,
    "n_max": 1024,
    "m_max": 1024,
}
AUDIT_DEFAULTS = {"box": [-5.0, 5.0], "pairs": 10_000, "grid": 41}
LATTICE_DEFAULTS = {"horizon": 1.0, "steps": 50}


@dataclass(eq=False)
class Problem:
    """Everything a config document describes."""

    spec: ProblemSpec
    witness: MokobodskiWitness | None
    horizon: float
    steps: int
    route: str
    solver: dict
    audit: dict
    document: dict

    def lattice(self) -> Lattice:
        return Lattice(self.horizon, self.steps)


def load_problem(config: dict | str | Path) -> Problem:
    """Parse and validate a config document (dict, JSON text or path)."""
    if isinstance(config, Path) or (isinstance(config, str) and not config.lstrip().startswith("{")):
        with open(config) as fh:
            config = json.load(fh)
    elif isinstance(config, str):
        config = json.loads(config)
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as err:
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ModelError(f"config schema violation at {path}: {err.message}") from None
    lower = config["lower"] if config["lower"] is not None else "-inf"
    upper = config["upper"] if config["upper"] is not None else "inf"
    lattice = {**LATTICE_DEFAULTS, **config.get("lattice", {})}
    solver = {**SOLVER_DEFAULTS, **config.get("solver", {})}
    audit = {**AUDIT_DEFAULTS, **config.get("audit", {})}
    route = config.get("route", "both")
    try:
        spec = make_spec(
            config["driver"], lower, upper, config["terminal"],
            Lipschitz(**config.get("lipschitz", {})), config.get("p", 2.0),
        )
        witness = None
        if "mokobodski" in config:
            mk = config["mokobodski"]
            witness = MokobodskiWitness(
                float(mk["x0"]),
                parse_expression(mk.get("integrand", "0"), WITNESS_VARS, "mokobodski integrand"),
                parse_expression(mk.get("vplus", "0"), WITNESS_VARS, "mokobodski vplus"),
                parse_expression(mk.get("vminus", "0"), WITNESS_VARS, "mokobodski vminus"),
            )
    except ExpressionError as err:
        raise ModelError(str(err)) from err
    if route in ("fixed-point", "both") and spec.driver_uses_z:
        raise AssumptionError(
            f"route {route!r} includes the fixed-point solver, whose driver must not depend on z "
            f"(driver {spec.driver.source!r})"
        )
    return Problem(
        spec, witness, float(lattice["horizon"]), int(lattice["steps"]), route, solver, audit, config
    )


def config_digest(document: dict) -> str:
    return hashlib.sha256(json.dumps(document, sort_keys=True).encode()).hexdigest()
