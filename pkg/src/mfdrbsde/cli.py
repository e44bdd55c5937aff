"""Command line front end.

Exit codes:

    0  success
    2  usage error
    3  configuration error (schema, parse, bad flag value)
    4  assumption validation failure
    5  contraction condition violated (override with --force)
    6  non-convergence
    7  verification failure (oracle, route comparison, counterexample)
    8  I/O error
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conditions import WitnessError, contraction_report, mokobodski_check
from .drbsde import FrozenDataError, dynkin_value_bruteforce, random_frozen_data, solve_reflected
from .fixedpoint import ContractionConditionError, ConvergenceError, PicardConfig, picard_solve
from .lattice import Lattice, d_norm
from .model import (
    AssumptionError,
    ModelError,
    Problem,
    audit_lipschitz,
    audit_monotonicity,
    check_separation,
    config_digest,
    load_problem,
    validate_terminal,
)
from .penalization import ScheduleError, StageError, cascade, counterexample_run, doubling_schedule

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_ASSUMPTION = 4
EXIT_CONTRACTION = 5
EXIT_CONVERGENCE = 6
EXIT_VERIFICATION = 7
EXIT_IO = 8

ORACLE_TOL = 1e-12
SOLUTION_HEADER = ["k", "j", "t", "b", "Y", "Z", "Kplus", "Kminus"]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def fmt(x) -> str:
    return format(float(x), ".17g")


def _open_out(path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        return open(path, "w", newline="")
    except OSError as err:
        raise CliError(f"cannot write {path}: {err}", EXIT_IO) from err


def write_csv(path: Path, header, rows) -> Path:
    try:
        with _open_out(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([v if isinstance(v, str) else fmt(v) if isinstance(v, float) else v for v in row])
    except OSError as err:
        raise CliError(f"cannot write {path}: {err}", EXIT_IO) from err
    return path


def emit_solution_csv(sol, lat: Lattice, path: Path) -> Path:
    """One row per node in ``(k, j)`` order with 17 significant digits."""
    def rows():
        for k, j in lat.nodes():
            yield [
                k,
                j,
                fmt(lat.time(k)),
                fmt(lat.brownian(k)[j]),
                fmt(sol.Y[k, j]),
                fmt(sol.Z[k, j]),
                fmt(sol.Kplus[k, j]),
                fmt(sol.Kminus[k, j]),
            ]

    return write_csv(path, SOLUTION_HEADER, rows())


def write_text(path: Path, lines) -> Path:
    try:
        with _open_out(path) as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as err:
        raise CliError(f"cannot write {path}: {err}", EXIT_IO) from err
    return path


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config_digest: str | None
    spec_digest: str | None
    lattice: dict
    route: str | None
    tolerances: dict
    seed: int
    options: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def semantic(self) -> dict:
        d = asdict(self)
        d.pop("outputs")
        d.pop("config_path")
        return d

    @property
    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.semantic(), sort_keys=True).encode()).hexdigest()

    def write(self, out: Path) -> Path:
        doc = {**asdict(self), "digest": self.digest}
        path = out / "manifest.json"
        try:
            with _open_out(path) as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as err:
            raise CliError(f"cannot write {path}: {err}", EXIT_IO) from err
        return path


# ---------------------------------------------------------------------------
# argument handling


def _delta(text: str):
    if text == "auto":
        return "auto"
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"delta must be 'auto' or a positive number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"delta must be positive, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfdrbsde", description="Mean-field doubly reflected BSDEs on a binomial lattice."
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON problem document")
    common.add_argument("--seed", type=int, default=0, help="RNG seed for audits and trials")
    common.add_argument("--tol", type=float, help="route tolerance (Picard tol or penalty stage gap)")
    common.add_argument("--steps", type=int, help="lattice steps N")
    common.add_argument("--horizon", type=float, help="time horizon T")
    common.add_argument("--route", choices=["fixed-point", "penalization", "both"])
    common.add_argument("--delta", type=_delta, help="window length or 'auto'")
    common.add_argument("--force", action="store_true", help="continue when the contraction condition fails")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("check-conditions", parents=[common], help="contraction constants and assumption audits")

    fp = sub.add_parser("solve-fixed-point", parents=[common], help="windowed or global Picard iteration")
    fp.add_argument("--mode", choices=["global", "windowed"])
    fp.add_argument("--max-iter", type=int)
    fp.add_argument("--norm", choices=["auto", "d", "sp"])

    pen = sub.add_parser("solve-penalized", parents=[common], help="double-indexed penalisation cascade")
    pen.add_argument("--n-max", type=int)
    pen.add_argument("--m-max", type=int)

    orc = sub.add_parser("oracle-compare", parents=[common], help="backward induction against brute force")
    orc.add_argument("--trials", type=int, default=100)

    cmp_ = sub.add_parser("compare-routes", parents=[common], help="fixed point against penalisation")
    cmp_.add_argument("--n-max", type=int)
    cmp_.add_argument("--m-max", type=int)
    cmp_.add_argument("--threshold", type=float, default=1e-2, help="largest accepted d_norm gap")

    cex = sub.add_parser("counterexample", parents=[common], help="the no-solution example on T = 1")
    cex.add_argument("--mmax", type=int, default=4096)
    return parser


def _problem(args) -> Problem:
    if args.config is None:
        raise CliError(f"{args.command} needs --config", EXIT_USAGE)
    try:
        doc = json.loads(args.config.read_text())
    except OSError as err:
        raise CliError(f"cannot read {args.config}: {err}", EXIT_IO) from err
    except json.JSONDecodeError as err:
        raise CliError(f"{args.config}: invalid JSON: {err}", EXIT_CONFIG) from err
    if args.steps is not None or args.horizon is not None:
        doc = {**doc, "lattice": {**doc.get("lattice", {})}}
        if args.steps is not None:
            doc["lattice"]["steps"] = args.steps
        if args.horizon is not None:
            doc["lattice"]["horizon"] = args.horizon
    if args.route is not None:
        doc = {**doc, "route": args.route}
    return load_problem(doc)


def _lattice(problem: Problem) -> Lattice:
    return problem.lattice()


def _picard_config(problem: Problem, args) -> PicardConfig:
    s = problem.solver
    delta = args.delta if args.delta is not None else s["delta"]
    return PicardConfig(
        mode=getattr(args, "mode", None) or s["mode"],
        delta=None if delta == "auto" else float(delta),
        tol=args.tol if args.tol is not None else s["tol"],
        max_iter=getattr(args, "max_iter", None) or s["max_iter"],
        norm=getattr(args, "norm", None) or s["norm"],
        target=s["target"],
        force=args.force,
    )


def _schedules(problem: Problem, args):
    n_max = getattr(args, "n_max", None)
    m_max = getattr(args, "m_max", None)
    n_max = problem.solver["n_max"] if n_max is None else n_max
    m_max = problem.solver["m_max"] if m_max is None else m_max
    tol = problem.solver["penalty_tol"]
    if args.command == "solve-penalized" and args.tol is not None:
        tol = args.tol
    return doubling_schedule(n_max), doubling_schedule(m_max), tol


def _manifest(args, problem: Problem | None, lattice: dict, tolerances: dict, options=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        config_path=str(args.config) if args.config else None,
        config_digest=config_digest(problem.document) if problem else None,
        spec_digest=problem.spec.digest() if problem else None,
        lattice=lattice,
        route=problem.route if problem else None,
        tolerances=tolerances,
        seed=args.seed,
        options=options or {},
    )


def _lat_doc(lat: Lattice) -> dict:
    return {"horizon": lat.horizon, "steps": lat.steps}


# ---------------------------------------------------------------------------
# subcommands


def cmd_check_conditions(args, say) -> int:
    problem = _problem(args)
    lat = _lattice(problem)
    spec = problem.spec
    target = problem.solver["target"]
    rep = contraction_report(spec.lipschitz, spec.p, lat.horizon, target)
    rng = np.random.default_rng(args.seed)
    box = tuple(problem.audit["box"])
    term = validate_terminal(spec, lat)
    sep = check_separation(spec, lat, box, problem.audit["grid"])
    lip_warn = audit_lipschitz(spec, lat.horizon, rng, box, problem.audit["pairs"])
    mono = audit_monotonicity(spec, lat.horizon, rng, box)
    moko = None
    if problem.witness is not None:
        try:
            moko = mokobodski_check(spec, problem.witness, lat, box, problem.audit["grid"])
        except WitnessError as err:
            raise CliError(str(err), EXIT_ASSUMPTION) from err

    rows = [
        ("lambda_at_zero", rep.lambda_at_zero),
        ("sigma_at_zero", rep.sigma_at_zero),
        ("cd1_holds", rep.cd1_holds),
        ("cd_p1_holds", rep.cd_p1_holds),
        ("delta_p", rep.delta_p),
        ("delta_1", rep.delta_1),
        ("target", target),
        ("terminal_compatible", term.passed),
        ("barriers_separated", sep.passed),
        ("separation_margin", sep.margin),
        ("lipschitz_warnings", len(lip_warn)),
        ("monotonicity_flags", mono.passed),
        ("mokobodski", None if moko is None else moko.passed),
    ]

    def show(v):
        if v is None:
            return "n/a"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return fmt(v)
        return str(v)

    out = args.out
    outputs = [write_csv(out / "conditions.csv", ["quantity", "value"], [(k, show(v)) for k, v in rows])]
    lines = [f"{k:22s} {show(v)}" for k, v in rows]
    lines += [f"warning: {w}" for w in lip_warn]
    if moko is not None:
        lines.append(f"mokobodski margins: lower {fmt(moko.lower_margin)}, upper {fmt(moko.upper_margin)}")
        lines.append(moko.note)
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(args, problem, _lat_doc(lat), {"target": target}, {"box": list(box)})
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)

    if not (term.passed and sep.passed) or (moko is not None and not moko.passed):
        return EXIT_ASSUMPTION
    if problem.route in ("fixed-point", "both") and not rep.holds_for(spec.p) and not args.force:
        return EXIT_CONTRACTION
    return EXIT_OK


def _validate_assumptions(problem: Problem, lat: Lattice):
    term = validate_terminal(problem.spec, lat)
    if not term.passed:
        j, _, xi, lo, hi = term.violations[0]
        raise CliError(
            f"terminal value {xi!r} at node ({lat.steps}, {j}) outside [{lo!r}, {hi!r}]", EXIT_ASSUMPTION
        )


def cmd_solve_fixed_point(args, say) -> int:
    problem = _problem(args)
    if problem.route == "penalization":
        raise CliError("config route is 'penalization'; use solve-penalized", EXIT_CONFIG)
    lat = _lattice(problem)
    _validate_assumptions(problem, lat)
    cfg = _picard_config(problem, args)
    res = picard_solve(problem.spec, lat, cfg)
    out = args.out
    outputs = [emit_solution_csv(res.solution, lat, out / "solution.csv")]
    lines = [
        f"value Y0            {fmt(res.solution.value)}",
        f"mode                {cfg.mode}",
        f"window delta        {fmt(res.delta)}",
        f"norm                {res.norm}",
        f"windows             {len(res.windows)}",
        f"iterations          {' '.join(map(str, res.iterations))}",
        f"final residual      {fmt(res.final_residual)}",
        f"skorokhod residuals {fmt(res.solution.skorokhod_plus)} {fmt(res.solution.skorokhod_minus)}",
    ] + [f"warning: {w}" for w in res.warnings]
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(
        args, problem, _lat_doc(lat), {"tol": cfg.tol, "max_iter": cfg.max_iter},
        {"mode": cfg.mode, "delta": cfg.delta, "norm": cfg.norm, "force": cfg.force},
    )
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)
    return EXIT_OK


def _run_cascade(problem: Problem, lat: Lattice, args):
    n_sched, m_sched, tol = _schedules(problem, args)
    state, report = cascade(problem.spec, lat, n_sched, m_sched, tol=tol)
    return state, report, (n_sched, m_sched, tol)


def cmd_solve_penalized(args, say) -> int:
    problem = _problem(args)
    if problem.route == "fixed-point":
        raise CliError("config route is 'fixed-point'; use solve-fixed-point", EXIT_CONFIG)
    lat = _lattice(problem)
    _validate_assumptions(problem, lat)
    state, report, (n_sched, m_sched, tol) = _run_cascade(problem, lat, args)
    out = args.out
    outputs = [emit_solution_csv(state, lat, out / "solution.csv")]
    fields = [
        "n", "m", "sup_second_moment", "z_energy", "kplus_terminal_sq", "kminus_terminal_sq",
        "lower_violation_sq", "upper_violation_sq", "lower_penalty_measure", "upper_penalty_measure",
        "m_gap", "n_gap",
    ]
    rows = [[("" if getattr(s, f) is None else getattr(s, f)) for f in fields] for s in report.stages]
    outputs.append(write_csv(out / "stages.csv", fields, rows))
    mono = report.monotonicity
    lines = [
        f"value Y0            {fmt(state.Y[0, 0])}",
        f"final stage         n={report.final_stage[0]} m={report.final_stage[1]}",
        f"stages run          {len(report.stages)}",
        f"n-limit reached     {'yes' if report.n_limit_reached else 'no (schedule exhausted)'}",
        f"monotonicity        {mono.violations} violations in {mono.pairs_checked} pairs, worst {fmt(mono.worst)}",
        f"monitors finite     {'yes' if report.monitors_finite() else 'no'}",
    ]
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(
        args, problem, _lat_doc(lat), {"penalty_tol": tol},
        {"n_schedule": n_sched, "m_schedule": m_sched},
    )
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)
    return EXIT_OK if report.monitors_finite() else EXIT_CONVERGENCE


def cmd_oracle_compare(args, say) -> int:
    steps = 3 if args.steps is None else args.steps
    if not 1 <= steps <= 3:
        raise CliError(f"oracle-compare needs 1 <= steps <= 3, got {steps}", EXIT_CONFIG)
    if args.trials < 1:
        raise CliError("--trials must be >= 1", EXIT_CONFIG)
    horizon = 1.0 if args.horizon is None else args.horizon
    lat = Lattice(horizon, steps)
    rng = np.random.default_rng(args.seed)
    rows, worst_bw, worst_gap = [], 0.0, 0.0
    for trial in range(args.trials):
        fd = random_frozen_data(lat, rng)
        bw = solve_reflected(fd).value
        supinf, infsup = dynkin_value_bruteforce(fd)
        dev, gap = abs(bw - supinf), abs(supinf - infsup)
        worst_bw, worst_gap = max(worst_bw, dev), max(worst_gap, gap)
        rows.append([trial, fmt(bw), fmt(supinf), fmt(infsup), fmt(dev), fmt(gap)])
    out = args.out
    outputs = [write_csv(out / "oracle.csv", ["trial", "backward", "supinf", "infsup", "deviation", "saddle_gap"], rows)]
    ok = worst_bw <= ORACLE_TOL and worst_gap <= ORACLE_TOL
    lines = [
        f"trials              {args.trials}",
        f"steps               {steps}",
        f"max |backward - supinf| {fmt(worst_bw)}",
        f"max |supinf - infsup|   {fmt(worst_gap)}",
        f"result              {'PASS' if ok else 'FAIL'} (tolerance {ORACLE_TOL:g})",
    ]
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(args, None, _lat_doc(lat), {"oracle": ORACLE_TOL}, {"trials": args.trials})
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)
    return EXIT_OK if ok else EXIT_VERIFICATION


def cmd_compare_routes(args, say) -> int:
    problem = _problem(args)
    lat = _lattice(problem)
    _validate_assumptions(problem, lat)
    cfg = _picard_config(problem, args)
    fp = picard_solve(problem.spec, lat, cfg)
    state, report, (n_sched, m_sched, tol) = _run_cascade(problem, lat, args)
    Yf, Yp = fp.solution.Y, state.Y
    gap = d_norm(Yf - Yp)
    node_gap = (Yf - Yp).max_abs()
    rows = [
        [k, j, fmt(lat.time(k)), fmt(lat.brownian(k)[j]), fmt(Yf[k, j]), fmt(Yp[k, j]), fmt(Yf[k, j] - Yp[k, j])]
        for k, j in lat.nodes()
    ]
    out = args.out
    outputs = [write_csv(out / "comparison.csv", ["k", "j", "t", "b", "Y_fixed_point", "Y_penalized", "difference"], rows)]
    ok = gap <= args.threshold
    lines = [
        f"fixed-point Y0      {fmt(Yf[0, 0])}",
        f"penalized Y0        {fmt(Yp[0, 0])}",
        f"d_norm gap          {fmt(gap)}",
        f"max node gap        {fmt(node_gap)}",
        f"final stage         n={report.final_stage[0]} m={report.final_stage[1]}",
        f"result              {'PASS' if ok else 'FAIL'} (threshold {args.threshold:g})",
    ]
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(
        args, problem, _lat_doc(lat), {"tol": cfg.tol, "penalty_tol": tol, "threshold": args.threshold},
        {"n_schedule": n_sched, "m_schedule": m_sched, "mode": cfg.mode, "delta": cfg.delta},
    )
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)
    return EXIT_OK if ok else EXIT_VERIFICATION


def cmd_counterexample(args, say) -> int:
    if args.horizon is not None and args.horizon != 1.0:
        raise CliError("the counterexample lives on T = 1", EXIT_CONFIG)
    if args.mmax < 0:
        raise CliError("--mmax must be >= 0", EXIT_CONFIG)
    steps = 100 if args.steps is None else args.steps
    lat = Lattice(1.0, steps)
    rep = counterexample_run(lat, doubling_schedule(args.mmax))
    rows = []
    for r in rep.rows:
        for k, t in enumerate(rep.times):
            rows.append([r.m, k, fmt(t), fmt(r.expectations[k]), fmt(0.0 - t), fmt(r.violation)])
    out = args.out
    outputs = [write_csv(out / "counterexample.csv", ["m", "level", "t", "expectation", "bound", "violation"], rows)]
    lines = [f"m={r.m:<6d} E[Y_0]={fmt(r.expectations[0])} violation={fmt(r.violation)}" for r in rep.rows]
    lines += [
        f"lower bound E[Y_t] >= -t holds       {'yes' if rep.lower_bound_holds else 'no'}",
        f"m = 0 error against -t               {fmt(rep.plain_exact_error)}",
        f"violation stays >= {rep.violation_floor:g}            {'yes' if rep.violation_persists else 'no'}",
        f"result                               {'PASS' if rep.passed else 'FAIL'}",
    ]
    outputs.append(write_text(out / "report.txt", lines))
    man = _manifest(args, None, _lat_doc(lat), {}, {"mmax": args.mmax})
    man.outputs = [str(p) for p in outputs]
    man.write(out)
    for line in lines:
        say(line)
    return EXIT_OK if rep.passed else EXIT_VERIFICATION


COMMANDS = {
    "check-conditions": cmd_check_conditions,
    "solve-fixed-point": cmd_solve_fixed_point,
    "solve-penalized": cmd_solve_penalized,
    "oracle-compare": cmd_oracle_compare,
    "compare-routes": cmd_compare_routes,
    "counterexample": cmd_counterexample,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    say = (lambda line: None) if args.quiet else print

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return COMMANDS[args.command](args, say)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except (AssumptionError, FrozenDataError) as err:
        print(f"assumption violated: {err}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except (ModelError, ScheduleError, ValueError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractionConditionError as err:
        print(f"{err}; rerun with --force to override", file=sys.stderr)
        return EXIT_CONTRACTION
    except (ConvergenceError, StageError) as err:
        print(f"not converged: {err}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    sys.exit(run(argv))
