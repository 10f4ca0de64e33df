"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so keep the split:
bad file bytes -> TensorFileError, bad values/shapes/configs ->
ValidationError, numeric degeneracies -> NumericError.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition (shape, range, config)."""


class TensorFileError(ValueError):
    """Tensor file is malformed (magic, version, truncation, trailing bytes)."""


class NumericError(ArithmeticError):
    """A computation is numerically undefined for the given inputs."""
