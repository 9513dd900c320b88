"""Deal-agreement load balancing: synchronous and asynchronous engines, a
self-stabilizing data link, invariant checkers and bound calculators."""

from .async_engine import AsyncSimulation, Policy, Schedule, run_async
from .errors import (
    BudgetExceeded,
    DealBalanceError,
    InvalidParameter,
    ParseError,
    UnexpectedAck,
    ValidationError,
)
from .graph import Graph, LoadMode, LoadVector, generate, load_graph, parse_graph, save_graph, serialize
from .metrics import (
    bound_budget,
    brute_force_reachable_check,
    check_monotonic_step,
    compute_metrics,
    is_eps_balanced,
    is_fair_transfer,
)
from .selfstab import FaultModel, SelfStabSimulation, run_selfstab
from .sync import Continuous, Diffusion, Discrete, Multi, run_sync

__all__ = [
    "AsyncSimulation",
    "BudgetExceeded",
    "Continuous",
    "DealBalanceError",
    "Diffusion",
    "Discrete",
    "FaultModel",
    "Graph",
    "InvalidParameter",
    "LoadMode",
    "LoadVector",
    "Multi",
    "ParseError",
    "Policy",
    "Schedule",
    "SelfStabSimulation",
    "UnexpectedAck",
    "ValidationError",
    "bound_budget",
    "brute_force_reachable_check",
    "check_monotonic_step",
    "compute_metrics",
    "generate",
    "is_eps_balanced",
    "is_fair_transfer",
    "load_graph",
    "parse_graph",
    "run_async",
    "run_selfstab",
    "run_sync",
    "save_graph",
    "serialize",
]
