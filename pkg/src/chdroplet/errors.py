"""Exception types raised by the numerical routines."""


class ChDropletError(Exception):
    """Base class for all package errors."""


class NonzeroMean(ChDropletError, ValueError):
    """A field that must lie in the zero-mean subspace has a nonzero mean."""


class NoBracket(ChDropletError):
    """Bisection could not bracket the chemical potential for the requested radius."""


class NoConvergence(ChDropletError):
    """An iterative solver stopped without meeting its tolerance.

    ``trace`` holds whatever per-iteration history the solver kept.
    """

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace or [])


class OutOfDomain(ChDropletError):
    """A droplet center violates the boundary clearance."""


class RootFindFailure(ChDropletError):
    """The mass-correction equation has no bracketed root."""


class IllConditioned(ChDropletError):
    """A Gram matrix is too close to singular for the requested expansion."""


class Singular(ChDropletError):
    """The reduced-coordinate matrix A is not invertible."""


class NotInTube(ChDropletError):
    """A field is too far from the droplet manifold to be projected."""


class NewtonDiverged(NoConvergence):
    """Newton iteration for the Fermi coordinates failed."""


class Diverged(ChDropletError):
    """The SPDE integrator exceeded its amplitude cap."""
