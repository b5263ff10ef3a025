"""Exception hierarchy shared across the package.

Every error carries an ``exit_code`` used by the command line interface:
2 for input or schema validation problems, 3 for numerical failures.
"""


class TVAError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InvalidDesignError(TVAError):
    """A factorial design or policy specification is malformed."""

    exit_code = 2


class SchemaError(TVAError):
    """A dataset does not conform to its declared schema."""

    exit_code = 2


class EmptyCellError(TVAError):
    """A design cell or pool that must contain units is empty."""

    exit_code = 2


class SingularDesignError(TVAError):
    """A design matrix is rank deficient where full rank is required."""

    exit_code = 3


class ConvergenceError(TVAError):
    """An iterative numerical routine failed to converge."""

    exit_code = 3


class PoolSizeError(TVAError):
    """A per-profile support is too large for atom enumeration."""

    exit_code = 3


class StageError(TVAError):
    """A pipeline stage failed; wraps the underlying error with context.

    Attributes
    ----------
    stage : str
        Name of the pipeline stage that raised.
    hint : str
        Short remediation hint for the operator.
    """

    def __init__(self, stage, hint, cause):
        self.stage = stage
        self.hint = hint
        self.__cause__ = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"stage {stage!r} failed: {cause} (hint: {hint})")
