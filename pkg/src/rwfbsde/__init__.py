"""Random-walk schemes for forward-backward SDEs with Skorohod-coupled error experiments."""

from __future__ import annotations

__version__ = "0.1.0"

from .problems import ProblemSpec, builtin_problem, reference_solution, registry_names, validate_problem
from .walk import WalkGrid, forward_walk, rademacher_path
from .solver import DiscreteSolution, brute_force_solution, solve_grid, solve_tree, zhat_at
from .skorohod import embedding_error_stats, sample_coupled
from .continuum import euler_fine, malliavin_weight, pde_reference_solver, z_weight_estimator
from .harness import ExperimentConfig, RateReport, emit_report, fit_slope, run_convergence, run_zn_vs_zhat

__all__ = [
    "DiscreteSolution",
    "ExperimentConfig",
    "ProblemSpec",
    "RateReport",
    "WalkGrid",
    "brute_force_solution",
    "builtin_problem",
    "emit_report",
    "embedding_error_stats",
    "euler_fine",
    "fit_slope",
    "forward_walk",
    "malliavin_weight",
    "pde_reference_solver",
    "rademacher_path",
    "reference_solution",
    "registry_names",
    "run_convergence",
    "run_zn_vs_zhat",
    "sample_coupled",
    "solve_grid",
    "solve_tree",
    "validate_problem",
    "z_weight_estimator",
    "zhat_at",
]
