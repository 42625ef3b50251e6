"""Exception hierarchy shared by all spdelab modules."""


class SpdeLabError(Exception):
    """Base class for every error raised by spdelab."""


class FormNotPSD(SpdeLabError, ValueError):
    pass


class EmptyInput(SpdeLabError, ValueError):
    pass


class DimensionMismatch(SpdeLabError, ValueError):
    pass


class LevelTooFine(SpdeLabError, ValueError):
    pass


class PartitionNotNested(SpdeLabError, ValueError):
    pass


class UnsupportedExponent(SpdeLabError, ValueError):
    pass


class InvalidWeight(SpdeLabError, ValueError):
    pass


class SolverError(SpdeLabError, RuntimeError):
    """Raised when a time-stepping scheme cannot produce a finite state."""


class SingularSystem(SolverError):
    pass


class ImplicitSolveFailed(SolverError):
    pass


class PicardDiverged(SolverError):
    pass


class RadiusOverflow(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


class PathFailed(SolverError):
    """A Monte Carlo path failed; ``seed`` identifies it for replay."""

    def __init__(self, message, seed, path_index):
        super().__init__(message)
        self.seed = seed
        self.path_index = path_index
