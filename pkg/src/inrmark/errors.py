class InrMarkError(Exception):
    pass


class ConfigurationError(InrMarkError, ValueError):
    pass


class ContractError(InrMarkError, ValueError):
    pass


class DomainError(InrMarkError, ValueError):
    pass


class DivergenceError(InrMarkError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step
        self.value = value
