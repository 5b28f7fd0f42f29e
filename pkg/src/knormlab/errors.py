"""Exception types; each maps to a CLI exit code."""


class KnormlabError(Exception):
    exit_code = 1


class ConfigError(KnormlabError, ValueError):
    """Invalid or infeasible configuration."""

    exit_code = 2


class ContractError(KnormlabError, ValueError):
    """A precondition of an operation was violated."""

    exit_code = 3


class DimensionError(ContractError):
    def __init__(self, op, axis, msg):
        self.op = op
        self.axis = axis
        super().__init__(f"{op}: axis '{axis}': {msg}")


class IngestionError(ContractError):
    """Malformed dataset file."""


class PrivacyBudgetExhausted(KnormlabError):
    exit_code = 4

    def __init__(self, spent, budget, who="run"):
        self.spent = spent
        self.budget = budget
        super().__init__(f"{who}: privacy budget exhausted (epsilon {spent:.4f} > {budget:.4f})")
