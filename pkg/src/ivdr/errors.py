"""Exception and warning types.

Input problems (bad files, bad configs, malformed specs) derive from
:class:`InputError`; numerical degeneracies hit while estimating derive
from :class:`EstimationError`. The CLI maps the two families to exit
codes 2 and 3.
"""


class IVDRError(Exception):
    """Base class for all package errors."""


class InputError(IVDRError):
    pass


class EstimationError(IVDRError):
    pass


class SpecError(InputError):
    pass


class ConfigError(InputError):
    pass


class InvalidTreatmentCoding(InputError):
    pass


class MissingData(InputError):
    def __init__(self, row, column):
        super().__init__(f"missing or non-finite value at row {row}, column {column!r}")
        self.row = row
        self.column = column


class DegenerateDesign(EstimationError):
    pass


class DegenerateModifier(EstimationError):
    pass


class TmleDegenerate(EstimationError):
    pass


class BootstrapUnstable(UserWarning):
    """More than 5% of bootstrap resamples failed; intervals are still returned."""
