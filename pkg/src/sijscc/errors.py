"""Exception hierarchy shared by all modules."""


class SIJSCCError(Exception):
    pass


class ConfigurationError(SIJSCCError, ValueError):
    """Invalid architecture or run configuration."""


class ShapeError(SIJSCCError, ValueError):
    """Tensor shapes or symbol lengths that do not fit together."""


class DegenerateInputError(SIJSCCError, ValueError):
    """Input that is well-typed but cannot be processed (all-zero, too small)."""


class ContractViolation(SIJSCCError, ValueError):
    """A caller broke a documented precondition, e.g. non-unit-power symbols."""


class IngestionError(SIJSCCError, OSError):
    """No usable images under a dataset root."""


class CheckpointError(SIJSCCError):
    """Checkpoint or symbol file unreadable or from an incompatible version."""


class TrainingDiverged(SIJSCCError, FloatingPointError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
