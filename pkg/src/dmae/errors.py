"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage errors exit 2 (argparse),
DataError 3, ConfigError 4, TrainingDiverged 5.
"""


class DmaeError(Exception):
    """Base class for package errors."""


class ShapeError(DmaeError):
    """Operand shapes are incompatible; message names the offending operand."""


class ConfigError(DmaeError):
    """A configuration value is invalid or inconsistent with the data/model."""


class DataError(DmaeError):
    """Input data cannot be parsed or violates a stated precondition."""


class CheckpointError(DataError):
    """A checkpoint container is unreadable.

    ``code`` distinguishes the failure: 'magic', 'version', 'truncated',
    'param-count', 'param-shape'.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class TrainingDiverged(DmaeError):
    """Training loss exceeded the divergence guard threshold."""
