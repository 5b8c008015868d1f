"""Exception hierarchy shared by every milgan module."""


class MilganError(Exception):
    """Base class; the CLI maps it to exit code 1."""


class DimensionError(MilganError, ValueError):
    pass


class EmptySupportError(MilganError, ValueError):
    pass


class LengthError(MilganError, ValueError):
    pass


class NumericalFault(MilganError, FloatingPointError):
    pass


class SchemaError(MilganError, ValueError):
    pass


class DanglingReferenceError(SchemaError):
    pass


class UnprojectedEntityError(MilganError, ValueError):
    pass


class InfeasibleError(MilganError, ValueError):
    pass


class ExhaustedVocabularyError(MilganError, ValueError):
    pass


class InvalidTrajectoryError(MilganError, ValueError):
    pass


class TransferError(MilganError, ValueError):
    pass
