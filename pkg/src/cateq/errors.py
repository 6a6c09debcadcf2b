"""Exception hierarchy.

Each family maps onto a CLI exit code: configuration problems exit 2, bad
input data exits 3, numerical or calibration failures exit 4.
"""


class CateqError(Exception):
    exit_code = 1


class ConfigError(CateqError, ValueError):
    exit_code = 2


class DataError(CateqError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    """A column named in the schema is missing or misused."""


class AlignmentError(DataError):
    """Per-sample vectors do not line up with the dataset they refer to."""


class NumericalError(CateqError, ArithmeticError):
    exit_code = 4


class FitError(NumericalError):
    pass


class DegenerateDesignError(NumericalError):
    """Residualized treatment has zero variance, so the effect is unidentified."""


class CalibrationError(NumericalError):
    pass


class ControlVariateGateError(NumericalError):
    """A user-supplied control variate failed the zero-mean pilot check."""

    def __init__(self, mean: float, se: float):
        self.mean = mean
        self.se = se
        super().__init__(
            f"control variate is not zero-mean on the pilot sample: "
            f"mean={mean:.6g}, se={se:.6g} (|mean| > 3 se)"
        )
