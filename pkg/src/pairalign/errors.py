"""Exception types shared across the package.

Every error raised on a contract violation derives from PipelineError so the
CLI can map library failures to a single exit code.
"""


class PipelineError(Exception):
    """Base class for all pairalign errors."""


class ConfigurationError(PipelineError):
    """Invalid configuration (bad dimensions, malformed config file, ...)."""


class ShapeError(PipelineError):
    """Tensor shape or channel count does not match the expected contract."""


class InputError(PipelineError):
    """Invalid runtime input (bad labels, empty batch, missing files, ...)."""


class SequencingError(PipelineError):
    """Stage-ordering violation in the progressive curriculum."""


class NumericGuardError(PipelineError):
    """A numeric guard tripped (zero-norm embedding, degenerate mixture, ...)."""


class TrainingDivergedError(PipelineError):
    """Non-finite loss encountered during training; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
