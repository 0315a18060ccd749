"""Whittle-index service placement on an edge server: exact analytics, simulation, learning."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ContractViolation,
    ConvergenceError,
    DeadStateError,
    DegenerateDenominatorError,
    EdgeWhittleError,
    ProtocolError,
    ReducibleChainError,
    ResourceBudgetError,
    ScenarioError,
)
from .model import ServiceParams, SystemConfig, cost, rates  # noqa: F401
