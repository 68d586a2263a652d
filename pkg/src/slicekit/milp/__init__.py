"""Exact mixed-integer linear programming: model container and branch-and-bound solver."""

from .model import (
    BINARY,
    CONTINUOUS,
    INTEGER,
    BranchRecord,
    Constraint,
    Model,
    Solution,
    Variable,
    check_feasible,
    to_lp_text,
)
from .solve import DEFAULT_GAP_TOL, BranchAndBoundSolver, Improver, SolverBackend, solve

__all__ = [
    "BINARY",
    "CONTINUOUS",
    "INTEGER",
    "BranchRecord",
    "Constraint",
    "Model",
    "Solution",
    "Variable",
    "check_feasible",
    "to_lp_text",
    "DEFAULT_GAP_TOL",
    "BranchAndBoundSolver",
    "Improver",
    "SolverBackend",
    "solve",
]
