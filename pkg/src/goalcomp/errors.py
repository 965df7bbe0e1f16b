"""Exception types raised across the package."""

from __future__ import annotations


class GoalCompError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GoalCompError, ValueError):
    pass


class BudgetExceededError(InvalidArgumentError):
    """A code length exceeds the per-sensor bit budget (n > R)."""


class ConfigError(InvalidArgumentError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


class ContractError(GoalCompError, RuntimeError):
    """A training-phase ordering or freeze contract was violated."""


class TrainingDivergedError(GoalCompError, RuntimeError):
    def __init__(self, phase: int, epoch: int, loss: float):
        self.phase = phase
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged in phase {phase}, epoch {epoch} (loss={loss!r})")


class FormatError(GoalCompError, ValueError):
    """A binary file (bundle, dataset cache, IDX) could not be parsed."""


class UnsupportedVersionError(FormatError):
    pass
