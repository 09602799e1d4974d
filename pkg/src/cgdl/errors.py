"""Exception types shared across the package."""


class CGDLError(Exception):
    """Base class for all package errors."""


class DimensionError(CGDLError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CGDLError, ValueError):
    """A documented precondition was violated (e.g. nonpositive variance)."""


class NonFiniteError(CGDLError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite values produced by '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(CGDLError, ValueError):
    """Invalid configuration or dataset parameters."""


class FormatError(CGDLError, ValueError):
    """Malformed file contents."""

    def __init__(self, message: str, offset: int | None = None, path: str | None = None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class CalibrationError(CGDLError, RuntimeError):
    """Detector statistics could not be fitted."""


class CheckpointError(CGDLError, ValueError):
    """Checkpoint is unreadable or has an unsupported version."""


class TrainingDiverged(CGDLError, FloatingPointError):
    """Training produced a non-finite loss term."""

    def __init__(self, term: str, epoch: int, batch: int):
        self.term = term
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite value in loss term '{term}' at epoch {epoch}, batch {batch}"
        )
