"""Exception types raised by the pereml library."""


class PeremlError(Exception):
    """Base class for all pereml errors."""


class DataSchemaError(PeremlError):
    """A dataset or scenario file violates the expected schema.

    Carries an optional 1-based line number for CSV diagnostics.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix = f"{path}:"
        if line is not None:
            prefix += f"{line}:"
        if prefix:
            prefix += " "
        super().__init__(prefix + message)


class NestingError(PeremlError):
    """Stratum assignments violate the nested block structure.

    Reports the first offending (run, stratum) pair.
    """

    def __init__(self, run, stratum, message):
        self.run = run
        self.stratum = stratum
        super().__init__(f"run {run}, stratum {stratum}: {message}")


class AmbiguousTreatmentError(PeremlError):
    """The treatment-matching tolerance induced a non-transitive grouping."""


class NonPositiveDefiniteError(PeremlError):
    """A candidate covariance matrix is not positive definite."""


class RankDeficientError(PeremlError):
    """A fixed-effects model matrix does not have full column rank."""


class IdentificationError(PeremlError):
    """The variance components are not identifiable (singular information)."""


class ConvergenceError(PeremlError):
    """REML iteration failed to converge within the iteration cap.

    Carries the last iterate and gradient norm for diagnosis.
    """

    def __init__(self, message, sigma=None, gradient_norm=None, n_iterations=None):
        self.sigma = sigma
        self.gradient_norm = gradient_norm
        self.n_iterations = n_iterations
        super().__init__(message)


class DegenerateModelError(PeremlError):
    """The residual variance is zero; the covariance model is degenerate."""


class KenwardRogerError(PeremlError):
    """The adjusted covariance is invalid (e.g. a negative diagonal entry)."""
