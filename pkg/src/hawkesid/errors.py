"""Exception hierarchy shared by every module."""

from __future__ import annotations

__all__ = [
    "HawkesIdError",
    "ValidationError",
    "UnstableModelError",
    "DivergenceError",
    "ConvergenceError",
    "SingularityError",
    "ExplosionError",
    "CapViolationError",
    "RankDeficiencyError",
    "DecompositionError",
    "ConsistencyError",
    "NotIdentifiableError",
    "ConfigError",
]


class HawkesIdError(RuntimeError):
    """Base class for all library errors."""


class ValidationError(HawkesIdError, ValueError):
    """Invalid parameters or violated precondition."""


class UnstableModelError(ValidationError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class DivergenceError(HawkesIdError):
    pass


class ConvergenceError(HawkesIdError):
    """Iterative method failed; carries the last iterate or residual."""

    def __init__(self, message: str, last=None, residual: float | None = None):
        super().__init__(message)
        self.last = last
        self.residual = residual


class SingularityError(HawkesIdError):
    pass


class ExplosionError(HawkesIdError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class CapViolationError(HawkesIdError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


class RankDeficiencyError(HawkesIdError):
    pass


class DecompositionError(HawkesIdError):
    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConsistencyError(HawkesIdError):
    pass


class NotIdentifiableError(HawkesIdError):
    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class ConfigError(HawkesIdError):
    pass
