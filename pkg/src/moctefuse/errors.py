"""Exception types shared across the package."""


class MoctefuseError(Exception):
    """Base class for package errors."""


class DimensionError(MoctefuseError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MoctefuseError, ValueError):
    """A documented precondition was violated."""


class StabilityError(MoctefuseError, ArithmeticError):
    pass


class IngestionError(MoctefuseError, ValueError):
    pass


class CheckpointError(MoctefuseError):
    pass


class TrainingError(MoctefuseError):
    """Non-finite values showed up during optimisation."""

    def __init__(self, message, param=None):
        super().__init__(message)
        self.param = param


class VerificationError(MoctefuseError, AssertionError):
    def __init__(self, message, index=None, deviation=None):
        super().__init__(message)
        self.index = index
        self.deviation = deviation
