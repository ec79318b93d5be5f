"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A parameter or experiment setting is invalid or infeasible."""


class ContractViolation(ValueError):
    """An operation was called with inputs outside its precondition."""


class RoundError(RuntimeError):
    """A component failed during a federated round."""

    def __init__(self, round_index: int, cause: BaseException):
        super().__init__(f"round {round_index} aborted: {cause}")
        self.round_index = round_index
        self.cause = cause
