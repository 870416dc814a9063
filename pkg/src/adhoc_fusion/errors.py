"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's shape or value contract."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or hit a numeric guard."""


class TapeError(RuntimeError):
    """Gradient API misuse, e.g. backward on a value no tape recorded."""


class ConfigError(ValueError):
    """A configuration object or file is invalid."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt, truncated, or version-incompatible."""


class DatasetError(RuntimeError):
    """A dataset file is corrupt, truncated, or version-incompatible."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class OptimizerError(RuntimeError):
    """An optimizer step received unusable gradients."""


class DivergenceError(RuntimeError):
    """Training diverged; carries the last finite-loss parameter snapshot."""

    def __init__(self, message, last_good=None, history=None):
        super().__init__(message)
        self.last_good = last_good
        self.history = history if history is not None else []
