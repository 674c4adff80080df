"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TdoaNetError(Exception):
    exit_code = 1


class ConfigError(TdoaNetError, ValueError):
    """Invalid scenario, arguments or dimensions."""

    exit_code = 2


class ObservabilityError(TdoaNetError):
    """The network/measurement structure is not distributed observable."""

    exit_code = 3


class GainSynthesisError(TdoaNetError):
    """No certified stabilizing block-diagonal gain was found."""

    exit_code = 3

    def __init__(self, message, best_rho=None):
        super().__init__(message)
        self.best_rho = best_rho


class NumericalError(TdoaNetError, ArithmeticError):
    """Numerical failure (non-convergence, singular matrices, NaN/Inf)."""

    exit_code = 4
