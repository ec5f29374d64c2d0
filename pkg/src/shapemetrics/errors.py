"""Exception hierarchy shared across the package.

Three root categories map onto distinct CLI exit codes: ConfigError (2)
for bad arguments or config files, DataError (3) for malformed or
out-of-contract inputs, NumericError (4) for non-finite values and
failed numerical procedures.
"""


class ConfigError(ValueError):
    """Invalid configuration: unknown keys, out-of-range values, bad CLI args."""


class DataError(ValueError):
    """Input data violates a documented contract."""


class NumericError(ArithmeticError):
    """A numerical invariant failed (non-finite value, no convergence)."""


class MeshFormatError(DataError):
    """Mesh file or array structure is malformed (bad indices, non-triangles)."""


class NotWatertightError(DataError):
    """Mesh failed the watertightness check; carries the full report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EmptyCloudError(DataError):
    """A point-cloud operation received or produced zero points."""


class NonFiniteError(NumericError):
    """NaN or inf encountered where finite values are required."""
