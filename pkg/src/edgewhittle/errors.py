"""Exception types raised across the package."""


class EdgeWhittleError(Exception):
    """Base class for all package errors."""


class ResourceBudgetError(EdgeWhittleError):
    """A solver would exceed its configured state-space / work budget."""


class ConvergenceError(EdgeWhittleError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, span=None):
        super().__init__(message)
        self.span = span


class ReducibleChainError(EdgeWhittleError):
    """The policy-induced chain has more than one closed class."""

    def __init__(self, message, classes=()):
        super().__init__(message)
        self.classes = classes


class DegenerateDenominatorError(EdgeWhittleError):
    """Index ratio denominator fell below the numerical floor."""


class DeadStateError(EdgeWhittleError):
    """The simulator reached a state with zero total transition rate."""


class ProtocolError(EdgeWhittleError):
    """A learner returned an infeasible action or broke the episode contract."""


class ContractViolation(EdgeWhittleError):
    """A caller passed arguments that violate an operation's precondition."""


class ScenarioError(EdgeWhittleError):
    """Invalid scenario configuration."""

    def __init__(self, message, field=None, line=None):
        loc = ""
        if field is not None:
            loc += f"field '{field}'"
        if line is not None:
            loc += f" (line {line})"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.field = field
        self.line = line
