"""Exception hierarchy shared by every stage of the pipeline."""


class SDCError(Exception):
    """Base class for all package errors."""


class FormatError(SDCError):
    """Bad magic, version or dtype code in a matrix container."""


class CorruptFile(SDCError):
    """Header dimensions disagree with the payload length."""


class DataError(SDCError, ValueError):
    """Non-finite or unparseable values in input data."""


class SplitError(SDCError):
    pass


class NoiseCeilingError(SDCError):
    pass


class EmptySelection(SDCError):
    pass


class SpecError(SDCError, ValueError):
    pass


class NumericsError(SDCError, FloatingPointError):
    pass


class TrainingDiverged(SDCError):
    pass


class ShapeError(SDCError, ValueError):
    pass


class SolverError(SDCError):
    pass


class ZeroVectorError(SDCError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class EmptyMaskError(SDCError):
    pass


class AtlasError(SDCError):
    pass


class ConsistencyError(SDCError):
    pass


class GroupError(SDCError):
    pass


class DegenerateInputError(SDCError):
    pass


class ValidationError(SDCError, ValueError):
    """Invalid user-supplied argument (CLI flags, config fields)."""
