class RobustBCError(Exception):
    """Base class for errors raised by this package."""


class ConvergenceError(RobustBCError):
    pass


class UnsupportedOperationError(RobustBCError):
    pass


class InvalidSpecError(RobustBCError, ValueError):
    pass


class ConfigError(RobustBCError, ValueError):
    pass


class TrainingDivergedError(RobustBCError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training diverged at epoch {epoch} (objective={value})")
        self.epoch = epoch
        self.value = value


class FormatError(RobustBCError, ValueError):
    """A file failed to parse; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
