"""Exception types raised across the package."""


class ParameterError(ValueError):
    """A model parameter violates its admissibility bounds."""


class ButterflyArbitrageError(ValueError):
    """The local-variance denominator is non-positive somewhere.

    A non-positive denominator means the implied risk-neutral density would
    be negative there, so no local-volatility diffusion reproduces the
    surface.
    """


class ConvergenceError(RuntimeError):
    """An iterative scheme failed to reach its tolerance within its budget."""
