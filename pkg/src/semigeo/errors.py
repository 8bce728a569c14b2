"""Error taxonomy shared by every module.

Config problems are reported before any compute starts; stability and solver
failures carry enough context (step, location, residual) for the CLI to write
a useful summary on the way out.
"""


class SemigeoError(Exception):
    """Base class for all package errors."""


class ConfigError(SemigeoError):
    """Invalid or inconsistent configuration (bad key, shape, precondition)."""


class UnsupportedDomain(SemigeoError):
    """Operation not defined for this domain kind (e.g. harmonic residuals
    off the torus)."""


class NumericalError(SemigeoError):
    """Computed quantity failed an internal sanity gate (NaN, asymmetry,
    quadrature breakdown). Distinct from a genuine stability violation."""


class StabilityViolation(SemigeoError):
    """Stability eigenvalue reached the inadmissible range (mu >= gate).

    Attributes
    ----------
    mu : float value that tripped the gate
    location : (x, y) coordinates of the offending grid node, when known
    step : macro-step index, when raised inside a run
    """

    def __init__(self, message, mu=None, location=None, step=None):
        super().__init__(message)
        self.mu = mu
        self.location = location
        self.step = step


class SolverDiverged(SemigeoError):
    """Iterative linear solver failed to reach tolerance.

    Attributes
    ----------
    residual : final relative residual
    iterations : iterations performed
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
