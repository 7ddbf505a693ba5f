"""Exception types shared across the package."""


class ForgetnotError(Exception):
    """Base class for all package errors."""


class ConfigError(ForgetnotError):
    """Invalid configuration value or combination."""


class SchemaError(ForgetnotError):
    """A file or mapping is missing required keys."""


class ShapeError(ForgetnotError):
    """Array shape incompatible with the requested operation."""


class ContractError(ForgetnotError):
    """A documented precondition was violated by the caller."""


class CapacityError(ForgetnotError):
    """An item cannot fit within a hard byte budget."""


class FormatError(ForgetnotError):
    """A serialized artifact is corrupt or truncated."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(ForgetnotError):
    """Training diverged or aborted mid-run."""

    def __init__(self, message, stage=None, epoch=None):
        parts = [message]
        if stage is not None:
            parts.append(f"stage={stage}")
        if epoch is not None:
            parts.append(f"epoch={epoch}")
        super().__init__(" ".join(parts))
        self.stage = stage
        self.epoch = epoch


class GroupingError(ForgetnotError):
    """Incompatible runs were mixed into one aggregate."""
