"""Exceptions and warnings shared across the package.

Errors carry an ``exit_code`` used by the command-line layer:
1 = configuration/validation, 2 = data, 3 = numerical.
"""

from __future__ import annotations


class TransferError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ValidationError(TransferError):
    """Invalid arguments, configuration, or call-site misuse."""

    exit_code = 1


class DataError(TransferError):
    """Problems with the content of an input dataset or file."""

    exit_code = 2


class NumericalError(TransferError):
    """The computation cannot proceed on this data (degeneracy, rank, mass)."""

    exit_code = 3


# --- validation -------------------------------------------------------------


class InvalidConfigError(ValidationError):
    pass


class UnsupportedDimensionError(ValidationError):
    pass


class GridMismatchError(ValidationError):
    pass


class EmptyUnitListError(ValidationError):
    pass


class UnmappedSiteError(ValidationError):
    pass


# --- data -------------------------------------------------------------------


class MissingColumnError(DataError):
    pass


class NonNumericValueError(DataError):
    def __init__(self, row: int, column: str, value: str):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"non-numeric value {value!r} in column {column!r} at data row {row}")


class DuplicateUnitError(DataError):
    pass


class NoTargetSiteError(DataError):
    pass


class MultipleTargetSitesError(DataError):
    pass


class TreatedUnitInTargetError(DataError):
    pass


class NoTreatedClustersError(DataError):
    pass


class NoControlClustersError(DataError):
    pass


class IoError(DataError):
    pass


# --- numerical --------------------------------------------------------------


class InsufficientLocalDataError(NumericalError):
    def __init__(self, message: str, site_id: str | None = None,
                 point_index: int | None = None, d_treat: int | None = None):
        self.site_id = site_id
        self.point_index = point_index
        self.d_treat = d_treat
        super().__init__(message)

    def tagged(self, site_id: str, d_treat: int | None = None) -> "InsufficientLocalDataError":
        msg = f"{self.args[0]} [site={site_id}"
        if d_treat is not None:
            msg += f", d={d_treat}"
        msg += "]"
        return InsufficientLocalDataError(msg, site_id=site_id,
                                          point_index=self.point_index, d_treat=d_treat)


class NoPairsError(NumericalError):
    pass


class NotPsdError(NumericalError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


class AllCandidatesFailedError(NumericalError):
    pass


class CollinearScoresError(NumericalError):
    pass


# --- warnings ---------------------------------------------------------------


class RankDeficientWarning(UserWarning):
    """Fewer informative eigenvalues than the requested basis size."""


class OutOfGridRangeWarning(UserWarning):
    """An evaluation point fell outside the grid bounding box and was clamped."""
