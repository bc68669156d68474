"""Exception hierarchy. Every error raised on purpose derives from
:class:`WelfareMTEError` so the CLI can turn it into an error record."""


class WelfareMTEError(Exception):
    """Base class for package errors."""


class InvalidInputError(WelfareMTEError, ValueError):
    """Non-finite or out-of-domain argument."""


class ConfigurationError(WelfareMTEError, ValueError):
    """Invalid population, estimator or run configuration."""


class SchemaError(WelfareMTEError, KeyError):
    """Missing, duplicated or malformed dataset columns."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ParseError(SchemaError):
    """CSV content that cannot be read; carries row and column location."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class RankDeficiencyError(WelfareMTEError, ValueError):
    """Design matrix is not of full column rank."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SeparationError(WelfareMTEError, RuntimeError):
    """Probit coefficients diverge (perfect or quasi-complete separation)."""


class ConvergenceError(WelfareMTEError, RuntimeError):
    """Iterative fit did not converge."""


class OutOfSupportError(WelfareMTEError, ValueError):
    """Evaluation point outside the supported participation range."""

    def __init__(self, message, support=None):
        super().__init__(message)
        self.support = support


class DegenerateOutcomeError(WelfareMTEError, ValueError):
    """Outcome that cannot be modelled (e.g. no rows)."""


class BootstrapAbortError(WelfareMTEError, RuntimeError):
    """Too many bootstrap replicates failed."""
