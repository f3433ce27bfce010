"""Exception hierarchy for the diagnosis toolkit.

Every class carries the exit code the command line reports for it:
2 usage/parameter, 3 data/IO, 4 numeric failure.
"""


class DiagnosisError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 3


class ParameterError(DiagnosisError, ValueError):
    """A value violates an operation's preconditions"""

    exit_code = 2


class ShapeError(ParameterError):
    """Array dimensions do not match what the operation expects"""


class DataError(DiagnosisError):
    """Input data is missing, malformed or unusable"""

    exit_code = 3


class FormatError(DataError):
    """Bytes or text do not follow the expected file/wire format"""

    def __init__(self, message, offset=None, row=None):
        super().__init__(message)
        self.offset = offset
        self.row = row


class InsufficientDataError(DataError):
    """Too few samples for the requested statistic"""


class DegenerateSignalError(DataError):
    """Signal has zero variance where a normalisation needs it"""


class ModelFileError(DataError):
    """Model document failed validation on load"""


class ModelVersionError(ModelFileError):
    pass


class ModelDimensionError(ModelFileError):
    pass


class MalformedModelError(ModelFileError):
    pass


class NumericError(DiagnosisError):
    """Non-finite values appeared during computation"""

    exit_code = 4


class TrainingDivergedError(NumericError):
    """Loss became NaN or infinite during training"""

    def __init__(self, epoch, message=None):
        super().__init__(message or f"Non-finite loss at epoch {epoch}")
        self.epoch = epoch


class ModelMismatchError(NumericError):
    """Loaded model does not accept the configured feature width"""
