class SitsClueError(Exception):
    pass


class ConfigError(SitsClueError, ValueError):
    pass


class DataError(SitsClueError, ValueError):
    pass


class FormatError(SitsClueError, ValueError):
    pass


class ContractError(SitsClueError, ValueError):
    """Shape or argument mismatch between cooperating operations."""


class NumericError(SitsClueError, ArithmeticError):
    pass


class GenerationError(SitsClueError, RuntimeError):
    pass


class EvaluationError(SitsClueError, ValueError):
    pass


class TrainingDiverged(SitsClueError, RuntimeError):
    def __init__(self, iteration, components):
        self.iteration = iteration
        self.components = dict(components)
        parts = ", ".join(f"{k}={v!r}" for k, v in self.components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {parts}")
