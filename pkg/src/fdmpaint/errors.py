"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes; the message names both."""


class ConfigError(ValueError):
    """A configuration value or combination is unsupported."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class GradientError(RuntimeError):
    """Gradient bookkeeping failed (non-scalar loss, NaN gradient, ...)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or of an unknown version."""


class MaskGenerationError(RuntimeError):
    """The mask generator could not hit the requested coverage bucket."""


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss; carries the last good parameter state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
