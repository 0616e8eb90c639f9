"""Exception hierarchy shared across the package."""

from __future__ import annotations


class FewShotError(Exception):
    """Base class for every error raised by fewshot_calib."""


class ConfigurationError(FewShotError, ValueError):
    pass


class EpisodeSamplingError(FewShotError):
    def __init__(self, message: str, class_label: int | None = None):
        super().__init__(message)
        self.class_label = class_label


class IdxFormatError(FewShotError):
    """Malformed IDX file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


class ShapeError(FewShotError, ValueError):
    pass


class ContractViolation(FewShotError, RuntimeError):
    pass


class TrainingError(FewShotError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class EstimationError(FewShotError):
    def __init__(self, message: str, class_label: int):
        super().__init__(message)
        self.class_label = class_label


class DegenerateInputError(FewShotError, ValueError):
    pass


class NumericError(FewShotError, FloatingPointError):
    def __init__(self, message: str, group: str | None = None):
        super().__init__(message)
        self.group = group


class DiagnosticsUnavailable(FewShotError):
    pass


class AggregationError(FewShotError, ValueError):
    pass
