"""Exception hierarchy shared across the package."""


class RobSuiteError(Exception):
    """Base class for all package errors."""


class DimensionError(RobSuiteError, ValueError):
    pass


class DomainError(RobSuiteError, ValueError):
    pass


class DegenerateCorrelationError(RobSuiteError, ValueError):
    pass


class NumericError(RobSuiteError, ArithmeticError):
    pass


class ConfigError(RobSuiteError, ValueError):
    pass


class TrainingError(RobSuiteError):
    pass


class CalibrationError(RobSuiteError):
    pass


class ZooError(RobSuiteError):
    pass


class ConstraintError(RobSuiteError, ValueError):
    pass


class CapabilityError(RobSuiteError):
    """Requested operation is not defined for this scheme or family."""


class GenerationError(RobSuiteError):
    pass


class EmptyPoolError(RobSuiteError):
    pass


class InfeasibleError(RobSuiteError):
    pass


class EmptySelectionError(RobSuiteError):
    pass


class AssemblyError(RobSuiteError):
    pass


class IntegrityError(RobSuiteError):
    pass


class ChecksumError(IntegrityError):
    pass


class VersionError(IntegrityError):
    pass


class TruncatedBlobError(IntegrityError):
    pass


class StageError(RobSuiteError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class MissingArtifactError(RobSuiteError):
    pass
