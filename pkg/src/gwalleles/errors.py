"""Exception types shared across the package."""


class GWAllelesError(Exception):
    """Base class for all package errors."""


class InfeasibleLaw(GWAllelesError):
    """A requested offspring law cannot be realized as a probability law."""


class InvalidLaw(GWAllelesError):
    """An input law violates the standing non-degeneracy hypotheses."""


class CapTooSmall(GWAllelesError):
    """A truncation cap dropped more probability mass than tolerated."""

    def __init__(self, dropped: float, tol: float, message: str | None = None):
        self.dropped = dropped
        self.tol = tol
        super().__init__(
            message or f"dropped mass {dropped:.3e} exceeds tolerance {tol:.3e}"
        )


class NonConvergence(GWAllelesError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"no convergence after {iterations} iterations (residual {residual:.3e})"
        )


class InvalidRegime(GWAllelesError):
    """An operation was invoked outside the regime where it is defined."""


class WalkCapExceeded(GWAllelesError):
    """A first-passage walk exceeded its step cap without terminating."""


class PopulationCapExceeded(GWAllelesError):
    """A simulated population outgrew the configured node cap.

    Carries whatever partial statistics were accumulated before the cap hit.
    """

    def __init__(self, message: str = "population cap exceeded", partial=None):
        self.partial = partial
        super().__init__(message)


class IncompleteForest(GWAllelesError):
    """A forest was truncated before the requested structure was complete."""


class EmptySample(GWAllelesError):
    """A statistical check received no samples."""


class InsufficientStrata(GWAllelesError):
    """No conditioning stratum accumulated enough replicates."""


class RegimeMismatch(GWAllelesError):
    """Law kind and limit-mechanism kind disagree in a sweep."""


class DomainError(GWAllelesError):
    """A closed-form transform was evaluated outside its domain."""


class DegenerateLevel(GWAllelesError):
    """A mass-tree level fell below the truncation threshold."""
