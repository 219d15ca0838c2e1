"""Exception types shared across the package."""


class EFNetError(Exception):
    pass


class DimensionError(EFNetError, ValueError):
    """Operand extents are incompatible."""


class ContractError(EFNetError, ValueError):
    """A precondition on an argument value was violated."""


class ConfigError(EFNetError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(EFNetError, ValueError):
    """Malformed file contents; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")
        self.offset = offset
        self.path = path


class TrainingDivergence(EFNetError, RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss
