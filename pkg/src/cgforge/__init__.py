"""Sparse Clebsch-Gordan tensor products: problem compiler, kernel generator and CPU engine."""
from .irreps import Irrep, Irreps, Rotation, parse_irreps, rep_matrix, wigner_D
from .cg import CGBlock, cg_block
from .tpspec import InvalidProblem, ValidatedProblem, check, load_problem, validate
from .scheduler import BudgetError, Schedule, build_schedule, split_multiplicities, traffic_report
from .engine import Batch, tp_backward, tp_double_backward, tp_forward

__version__ = "0.1.0"
