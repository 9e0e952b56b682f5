"""Exception hierarchy.

Every error carries the pipeline ``stage`` that raised it and maps onto one of
the CLI exit codes (2 validation, 3 data, 4 convergence, 5 internal).
"""

from __future__ import annotations


class SynthGrowthError(Exception):
    exit_code = 5
    stage = "internal"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {
            "error": type(self).__name__,
            "stage": self.stage,
            "message": str(self),
            "exit_code": self.exit_code,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value):
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    try:
        return float(value)
    except (TypeError, ValueError):
        return repr(value)


class ValidationError(SynthGrowthError):
    exit_code = 2
    stage = "config"


class DataError(SynthGrowthError):
    exit_code = 3
    stage = "panel-data"


class SchemaError(DataError):
    pass


class RowError(DataError):
    def __init__(self, message: str, line: int, **details):
        super().__init__(f"line {line}: {message}", line=line, **details)
        self.line = line


class ConflictError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DependencyError(DataError):
    """A stage was asked to run before the artifact it consumes exists."""

    stage = "cli"


class SynthError(SynthGrowthError):
    exit_code = 3
    stage = "synth-control"


class NoDonorError(SynthError):
    pass


class ConvergenceError(SynthGrowthError):
    exit_code = 4

    def __init__(self, message: str, stage: str = "gam-fit", **details):
        super().__init__(message, **details)
        self.stage = stage


class UndefinedStatisticError(SynthGrowthError):
    exit_code = 3
    stage = "synth-control"


class GrowthDomainError(SynthGrowthError):
    exit_code = 2
    stage = "growth-family"


class SimulationDivergedError(SynthGrowthError):
    exit_code = 4
    stage = "growth-family"


class BasisRankError(SynthGrowthError):
    exit_code = 3
    stage = "spline-smooth"


class FrameError(SynthGrowthError):
    exit_code = 3
    stage = "gam-fit"


class RankDeficiencyError(SynthGrowthError):
    exit_code = 4
    stage = "gam-fit"

    def __init__(self, message: str, column: str, **details):
        super().__init__(message, column=column, **details)
        self.column = column


class MetricsError(SynthGrowthError):
    exit_code = 4
    stage = "gam-fit"


class InferenceError(SynthGrowthError):
    exit_code = 3
    stage = "inference"


class StudyError(SynthGrowthError):
    exit_code = 4
    stage = "evaluation"
