"""Exception hierarchy.

Every error raised by the package derives from :class:`GRBError`, and each
carries the CLI exit code it maps to (2 = validation, 3 = runtime).
"""


class GRBError(Exception):
    exit_code = 3


class ValidationError(GRBError):
    exit_code = 2


# graph-core
class MissingFileError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class LabelOutOfRangeError(ValidationError):
    pass


class IoFailureError(GRBError):
    pass


class DuplicateAddError(ValidationError):
    pass


class MissingRemoveError(ValidationError):
    pass


class SelfLoopForbiddenError(ValidationError):
    pass


class InvalidTargetError(ValidationError):
    pass


class EmptyNeighborhoodError(ValidationError):
    pass


# data-prep
class ZeroVarianceError(ValidationError):
    pass


class TooSmallError(ValidationError):
    pass


class FractionOverflowError(ValidationError):
    pass


class UnknownDatasetError(ValidationError):
    pass


# diff-engine
class NonScalarLossError(ValidationError):
    pass


# training / defenses
class DivergedError(GRBError):
    pass


class EmptyTrainSetError(ValidationError):
    pass


class RankTooLargeError(ValidationError):
    pass


# attacks
class GradientUnavailableError(GRBError):
    pass


class TooLargeForDenseError(ValidationError):
    pass


# evaluation
class EmptyMaskError(ValidationError):
    pass
