"""Exception types raised across the package."""


class ScmtfError(Exception):
    """Base class for all package errors."""


class DimensionError(ScmtfError, ValueError):
    """Array shapes or ranks do not agree."""


class ParameterError(ScmtfError, ValueError):
    """A hyperparameter or argument is outside its valid domain."""


class InputError(ScmtfError, ValueError):
    """Malformed user data (labels, names, ...)."""


class SchemaError(InputError):
    """A long-format record refers to an unknown feature or window."""


class DegenerateBatchError(ScmtfError, ValueError):
    """Batch statistics are undefined (train-mode batch of size < 2)."""


class DegenerateScaleError(ScmtfError, ValueError):
    """A standardization group has too few observed entries."""


class DivergenceError(ScmtfError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, step, last_finite_loss=None):
        self.step = step
        self.last_finite_loss = last_finite_loss
        msg = f"non-finite loss at step {step}"
        if last_finite_loss is not None:
            msg += f" (last finite total loss {last_finite_loss:.6g})"
        super().__init__(msg)
