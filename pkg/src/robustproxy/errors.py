"""Exception types shared across the toolkit."""


class ContractError(ValueError):
    """An input violated a documented precondition."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, missing, or incompatible."""


class IngestionError(RuntimeError):
    """Dataset files are missing or truncated."""


class DivergenceError(RuntimeError):
    """An optimization produced a non-finite loss."""

    def __init__(self, message, step=None, value=None):
        super().__init__(message)
        self.step = step
        self.value = value


class ConfigError(ValueError):
    """Experiment config failed schema validation."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
