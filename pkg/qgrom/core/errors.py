"""Exception hierarchy.

Validation errors map to CLI exit code 1, numerical failures to exit code 2.
"""
from typing import List, Optional, Sequence


class QGRomError(Exception):
    """Base class for every error raised by qgrom."""

    exit_code = 1


# --- validation family -----------------------------------------------------

class InvalidArgumentError(QGRomError, ValueError):
    pass


class ConfigError(QGRomError):
    pass


class FieldEvaluationError(QGRomError):
    def __init__(self, message: str, cell: Optional[int] = None):
        super().__init__(message)
        self.cell = cell


class SnapshotFormatError(QGRomError):
    pass


class ArtifactMismatchError(QGRomError):
    pass


class ArtifactIncompleteError(QGRomError):
    pass


# --- numerical family ------------------------------------------------------

class NumericalError(QGRomError):
    exit_code = 2


class SolverConvergenceError(NumericalError):
    def __init__(self, message: str, residuals: Sequence[float]):
        super().__init__(message)
        self.residuals: List[float] = list(residuals)

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")


class StepError(NumericalError):
    def __init__(self, message: str, step: int, operation: str):
        super().__init__(message)
        self.step = step
        self.operation = operation


class SimulationBlowUpError(NumericalError):
    def __init__(self, message: str, time: float, step: int):
        super().__init__(message)
        self.time = time
        self.step = step


class LstmDivergenceError(NumericalError):
    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


class RolloutDivergenceError(NumericalError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class PipelineStageError(QGRomError):
    """Failure inside the offline pipeline, tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"offline stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
