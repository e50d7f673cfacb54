"""Exception hierarchy shared by every module."""


class VPGError(Exception):
    """Base class for all package errors."""


class DimensionError(VPGError, ValueError):
    pass


class StoreError(VPGError):
    def __init__(self, message: str, written: int = 0):
        super().__init__(message)
        self.written = written


class ExtractionError(VPGError):
    pass


class UnknownEntityError(VPGError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument
        return str(self.args[0]) if self.args else "unknown entity"


class DuplicateKeyError(VPGError, ValueError):
    pass


class InsufficientCalibrationData(VPGError, ValueError):
    pass


class LabelingError(VPGError):
    pass


class InsufficientTriplets(VPGError, ValueError):
    pass


class EmptyEvaluationError(VPGError, ValueError):
    pass


class ConfigError(VPGError, ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = list(violations)
