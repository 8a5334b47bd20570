"""Exception types raised by the rcpm package."""


class RCPMError(Exception):
    """Base class for all package errors."""


class CutLocusError(RCPMError, ValueError):
    """A logarithm map was requested at (numerically) antipodal points."""


class DegenerateInputError(RCPMError, ValueError):
    """An ambient vector could not be projected onto the manifold."""


class SingularJacobianError(RCPMError, ArithmeticError):
    """A block Jacobian determinant vanished."""


class NonFiniteLossError(RCPMError, ArithmeticError):
    """A loss evaluation produced NaN or infinity.

    ``step`` and ``sample`` locate the failure when known.
    """

    def __init__(self, message, step=None, sample=None):
        super().__init__(message)
        self.step = step
        self.sample = sample


class InvalidBatchError(RCPMError, ValueError):
    """A loss was requested on an empty or malformed batch."""


class ConfigError(RCPMError, ValueError):
    """A training configuration failed validation."""
