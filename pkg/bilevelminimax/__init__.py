"""Python library for bilevel optimization with a convex-concave minimax lower level.

A penalty reformulation turns the bilevel problem into a single nonconvex-
concave saddle problem, solved by an inexact proximal-point loop whose
strongly-convex-strongly-concave subproblems go to OptFOM (exact gradients)
or SAPD (stochastic gradients).
"""

import logging

from .constrained import ConstrainedBilevelProblem, constrained_kkt, reformulate
from .driver import (
    InitializationError,
    SolveResult,
    SolverConfig,
    compute_stochastic_K,
    initialize,
    solve,
    solve_deterministic,
    solve_stochastic,
)
from .kkt import kkt_report, pd_stationarity
from .optfom import optfom
from .penalty import assemble_penalty
from .problem import BilevelMinimaxProblem, BlockLayout, lower_gap, make_noisy
from .sapd import sapd

__version__ = "0.1.0"

_LOGGER = logging.getLogger(__name__)

__all__ = [
    "BilevelMinimaxProblem",
    "BlockLayout",
    "ConstrainedBilevelProblem",
    "InitializationError",
    "SolveResult",
    "SolverConfig",
    "assemble_penalty",
    "compute_stochastic_K",
    "constrained_kkt",
    "initialize",
    "kkt_report",
    "lower_gap",
    "make_noisy",
    "optfom",
    "pd_stationarity",
    "reformulate",
    "sapd",
    "solve",
    "solve_deterministic",
    "solve_stochastic",
]
