"""Exception hierarchy shared by every flowscan module."""


class FlowScanError(Exception):
    """Base class for all flowscan errors."""


class ConfigError(FlowScanError, ValueError):
    """Invalid configuration or hyperparameter."""


class ContractError(FlowScanError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(FlowScanError, ArithmeticError):
    """A NaN or Inf appeared; ``op`` names the operation that produced it."""

    def __init__(self, op, message=None):
        self.op = op
        super().__init__(message or f"non-finite value produced by '{op}'")


class SchemaError(FlowScanError, ValueError):
    """Input sets do not match the (n, d) schema a model was built for."""


class CheckpointError(FlowScanError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class CorruptFileError(CheckpointError):
    pass


class FsetError(FlowScanError):
    pass


class BadMagicError(FsetError):
    pass


class TruncatedFileError(FsetError):
    pass


class DimensionMismatchError(FsetError):
    pass


class TractabilityError(FlowScanError):
    """Brute-force enumeration would be too large."""


class BudgetError(FlowScanError):
    """Quadrature grid exceeds the point budget."""


class SingularJacobianError(FlowScanError, ArithmeticError):
    """A finite-difference Jacobian is numerically singular."""
