"""Exception hierarchy shared by every stage of the forecasting pipeline."""


class TrialHorizonError(Exception):
    """Base class for all package errors."""


class DataError(TrialHorizonError):
    """Raised for problems in the historical input data."""


class MalformedRow(DataError):
    def __init__(self, row, message):
        self.row = row
        super().__init__(f"row {row}: {message}")


class InvariantViolation(DataError):
    def __init__(self, row, message):
        self.row = row
        where = f"row {row}: " if row is not None else ""
        super().__init__(f"{where}{message}")


class DuplicateSite(DataError):
    def __init__(self, row, study_id, site_id):
        self.row = row
        super().__init__(f"row {row}: site {site_id!r} appears twice in study {study_id!r}")


class EmptyDataset(DataError):
    pass


class ZeroStartupTime(DataError):
    pass


class ZeroExposureWithCount(DataError):
    pass


class InsufficientData(DataError):
    pass


class UnknownCountry(TrialHorizonError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class FitError(TrialHorizonError):
    """Raised when a model fit fails numerically."""


class NonConvergence(FitError):
    pass


class NumericalFailure(FitError):
    pass


class NonFiniteLikelihood(FitError):
    def __init__(self, index, message="non-finite likelihood term"):
        self.index = index
        super().__init__(f"combination {index}: {message}")


class StuckChain(FitError):
    pass


class ModelMismatch(TrialHorizonError):
    pass


class EmptyInput(TrialHorizonError, ValueError):
    pass
