"""Exception types shared across the package.

The CLI maps these onto exit codes: config and input-validation problems
exit 2, remote oracle failures exit 4, everything else that goes wrong at
runtime exits 3.
"""


class CellTyperError(Exception):
    """Base class for all errors raised by this package."""


class DataError(CellTyperError):
    """Malformed or inconsistent expression data or metadata."""


class ShapeError(CellTyperError):
    """Array dimensions do not line up with the declared configuration."""


class FrozenParamsError(CellTyperError):
    """A training entry point tried to modify frozen base parameters."""


class CapacityError(CellTyperError):
    """Classification head has no free slot left."""


class TrainingDivergedError(CellTyperError):
    """Loss or a gradient went non-finite during optimization."""


class RegistryError(CellTyperError):
    """Plugin registry misuse: missing plugin or non-increasing version."""


class StoreError(CellTyperError):
    """Vector store misuse: wrong dimension, wrong source tag, empty store."""


class CalibrationError(CellTyperError):
    """Threshold calibration is impossible, e.g. a class with one member."""


class OracleError(CellTyperError):
    """Base class for remote oracle failures."""


class OracleTimeoutError(OracleError):
    pass


class OracleHTTPError(OracleError):
    pass


class OracleMalformedReplyError(OracleError):
    pass


class TransitionError(CellTyperError):
    """Illegal (stage, action) pair in the planner state machine."""


class ExecutionError(CellTyperError):
    """A plan step failed; carries the partial execution log."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log if log is not None else []


class UnansweredQuestionError(ExecutionError):
    """Batch execution hit an AskUser step with no answer supplied."""


class ConfigError(CellTyperError):
    """Bad configuration file or invalid CLI inputs."""
