"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ShapeError(ValidationError):
    """Array shapes or dimensions do not match."""


class SamplingError(RuntimeError):
    """The reverse-diffusion loop produced an invalid intermediate."""


class TrainingDivergenceError(RuntimeError):
    """Training loss became non-finite."""


class CheckpointError(ValidationError):
    """Checkpoint contents disagree with their declared configuration."""
