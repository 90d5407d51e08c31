"""Exception types shared across the package."""


class SelfCalError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(SelfCalError, ValueError):
    """An operation was called with arguments that violate its contract."""


class DecompositionError(SelfCalError, ArithmeticError):
    """Cholesky factorization failed (matrix not positive definite)."""


class SingularMatrixError(SelfCalError, ArithmeticError):
    """A triangular factor has a zero diagonal entry and cannot be inverted."""


class CheckpointError(SelfCalError):
    """Base class for checkpoint serialization errors."""


class BadMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(CheckpointError):
    """File ends before the declared header or payload is complete."""


class ShapeMismatchError(CheckpointError):
    """Declared tensor shapes do not match the payload layout."""


class CorpusTooSmallError(SelfCalError, ValueError):
    """The corpus has fewer tokens than the operation requires."""


class GenerationStalledError(SelfCalError, RuntimeError):
    """Sequence assembly made no progress across the retry budget."""


class UsageError(SelfCalError, ValueError):
    """Invalid command-line usage (maps to exit code 1)."""
