"""Exception types shared across the package."""


class DomainError(ValueError):
    """Relaxation parameters outside the admissible set ``T1 > T2 > 0``."""


class BoundaryError(DomainError):
    """A finite-difference stencil would leave the admissible set."""


class TrainingDiverged(RuntimeError):
    """Surrogate training produced a non-finite loss."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training loss became non-finite at epoch {epoch}")


class DivergenceError(RuntimeError):
    """A solver produced a non-finite objective."""

    def __init__(self, message, dump=None):
        self.dump = dump or {}
        super().__init__(message)
