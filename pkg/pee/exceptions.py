from typing import Dict, Optional


class PeelException(Exception):
    """Common base for all pipeline exceptions."""

    def __str__(self):
        """Text representation of the exception."""
        return super().__str__()

    def dump(self) -> Dict[str, str]:
        """Machine-readable form, printed by the CLI on failure."""
        return {"type": self.__class__.__name__, "message": str(self)}


class ConfigurationError(PeelException):
    """Raised when configuration values are invalid or inconsistent."""

    pass


class ParseError(PeelException):
    """Raised when an input file contains malformed content.

    :param path: Path to the parsed file.
    :param lineno: One-based line number of the offending line.
    :param message: Exception message.
    """

    def __init__(self, path: str, lineno: int, message: str):
        self.path: str = path
        self.lineno: int = lineno
        self.message: str = message

    def __str__(self) -> str:
        return f"{self.path}:{self.lineno}: {self.message}"


class EmptyDatasetError(PeelException):
    """Raised when no interaction survives filtering."""

    pass


class NotFoundError(PeelException):
    """Raised when an user or item id is not known to the structure."""

    pass


class TrainingDivergedError(PeelException):
    """Raised when a loss or a gradient stops being finite.

    :param stage: Pipeline stage name.
    :param step: Optimizer step at which the problem was detected.
    :param diagnostics: Names and values that help locating the problem.
    """

    def __init__(self, stage: str, step: int, diagnostics: Optional[Dict] = None):
        self.stage: str = stage
        self.step: int = step
        self.diagnostics: Dict = diagnostics or {}

    def __str__(self) -> str:
        details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
        return f"Stage {self.stage} diverged at step {self.step}: {details}."


class BudgetInfeasibleError(PeelException):
    """Raised when memory budget cannot hold the minimal package.

    :param requested: Requested budget in bytes.
    :param minimal: Smallest feasible budget in bytes.
    :param unit: Unit of both values.
    """

    def __init__(self, requested: int, minimal: int, unit: str = "bytes"):
        self.requested: int = requested
        self.minimal: int = minimal
        self.unit: str = unit

    def __str__(self) -> str:
        return (
            f"Budget of {self.requested} {self.unit} is not feasible, "
            f"the package needs at least {self.minimal} {self.unit}."
        )


class ClusteringError(PeelException):
    """Raised when K-means cannot produce a valid partition."""

    pass


class FormatError(PeelException):
    """Raised when binary file has wrong magic, version or length."""

    pass


class SchemaMismatchError(PeelException):
    """Raised when two reports cannot be compared."""

    pass


class StageError(PeelException):
    """Raised by the experiment runner when a stage fails.

    :param stage: Stage name.
    :param cause: The original exception.
    """

    def __init__(self, stage: str, cause: Exception):
        self.stage: str = stage
        self.cause: Exception = cause

    def __str__(self) -> str:
        return f"Stage {self.stage} failed: {self.cause}"


class InstrumentationError(PeelException):
    """Raised when a code path that must not train or rebuild did so."""

    pass
