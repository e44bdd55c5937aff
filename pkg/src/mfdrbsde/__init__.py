"""Mean-field doubly reflected BSDEs on a binomial lattice."""

from .conditions import contraction_report, find_delta, lambda_contraction, mokobodski_check, sigma_contraction
from .drbsde import DRSolution, FrozenData, dynkin_value_bruteforce, skorokhod_residuals, solve_reflected
from .fixedpoint import PicardConfig, empirical_contraction, freeze, picard_solve
from .lattice import AdaptedProcess, Lattice, d_norm, sp_norm
from .model import ProblemSpec, load_problem, make_spec
from .penalization import cascade, counterexample_run, monotonicity_check, solve_penalized_stage

__all__ = [
    "AdaptedProcess",
    "DRSolution",
    "FrozenData",
    "Lattice",
    "PicardConfig",
    "ProblemSpec",
    "cascade",
    "contraction_report",
    "counterexample_run",
    "d_norm",
    "dynkin_value_bruteforce",
    "empirical_contraction",
    "find_delta",
    "freeze",
    "lambda_contraction",
    "load_problem",
    "make_spec",
    "mokobodski_check",
    "monotonicity_check",
    "picard_solve",
    "sigma_contraction",
    "skorokhod_residuals",
    "solve_penalized_stage",
    "solve_reflected",
    "sp_norm",
]
